//! `dualad` command-line front end.
//!
//! Exit status: 0 success, 1 other failure, 2 configuration, 3 input,
//! 4 numeric, 5 calibration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualad::backbone::{init_networks, read_checkpoint, train, write_checkpoint, Arch};
use dualad::config::{DatasetSource, PipelineConfig};
use dualad::dataset::{export_loco_layout, read_image, DatasetBundle, LoadOptions, Split};
use dualad::detector::{calibrate, BranchSelection, Detector};
use dualad::picturable::{write_heatmap_png, write_raw_map};
use dualad::report::{bench, evaluate, latency_table};
use dualad::stats::{sha256, Statistics};
use dualad::{Error, Result};

#[derive(Parser)]
#[command(name = "dualad", version, about = "Two-branch image anomaly detection")]
struct Cli {
    /// Pipeline config file.
    #[arg(long, global = true, default_value = "dualad.conf")]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts; relative artifact paths resolve against it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overwrite existing output.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as a category directory under --out.
    Generate,
    /// Train student and autoencoder; writes the checkpoint and a loss CSV.
    Train {
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides backbone.steps. 0 is allowed with --resume.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fit the Gaussian and both normalizers; writes the statistics file.
    Calibrate,
    /// Score one PNG image.
    Score {
        image: PathBuf,
        /// Write the combined anomaly map as a color PNG.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Write the combined anomaly map as raw f32 values.
        #[arg(long)]
        raw_map: Option<PathBuf>,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Score the test split and write report.json and report.csv.
    Evaluate {
        #[arg(long, default_value = "fused")]
        branch: BranchSelection,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Print per-stage latency over the test images.
    Bench {
        #[arg(long)]
        allow_mismatch: bool,
    },
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.cfg.eval.checkpoint)
    }

    fn load_detector(&self, allow_mismatch: bool) -> Result<Detector> {
        let ck_path = self.checkpoint_path();
        let ck_bytes = fs::read(&ck_path).map_err(|e| {
            Error::Input(format!("cannot read checkpoint {}: {e}", ck_path.display()))
        })?;
        let bundle = read_checkpoint(&ck_path)?;
        let stats = Statistics::read(&self.resolve(&self.cfg.eval.statistics))?;
        if stats.provenance.config_sha256 != self.cfg.hash() {
            eprintln!("warning: statistics were calibrated with a different config");
        }
        stats.into_detector(bundle, &ck_bytes, allow_mismatch)
    }
}

fn generate(ctx: &Ctx) -> Result<()> {
    let DatasetSource::Synthetic(synth) = &ctx.cfg.dataset else {
        return Err(Error::Config(
            "generate needs a synthetic dataset (synth.* keys)".into(),
        ));
    };
    let target = ctx.out.join(&synth.category);
    let occupied = fs::read_dir(&target)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied {
        if !ctx.force {
            return Err(Error::Refused(format!(
                "{} is not empty; pass --force to overwrite",
                target.display()
            )));
        }
        fs::remove_dir_all(&target)?;
    }
    let bundle = ctx.cfg.load_dataset()?;
    let root = export_loco_layout(&bundle, &ctx.out)?;
    println!("wrote {}", root.display());
    print_counts(&bundle);
    Ok(())
}

fn print_counts(bundle: &DatasetBundle) {
    for split in Split::ALL {
        println!("{split}: {}", bundle.split_len(split));
    }
}

fn train_cmd(ctx: &Ctx, resume: Option<&Path>, steps: Option<usize>) -> Result<()> {
    let dataset = ctx.cfg.load_dataset()?;
    let trainset = dataset.nonempty_split(Split::Train)?;
    let mut hparams = ctx.cfg.train.clone();
    if let Some(s) = steps {
        hparams.steps = s;
    }
    let bundle = match resume {
        Some(p) => read_checkpoint(p)?,
        None => {
            let (h, w, c) = dataset
                .image_shape()
                .ok_or_else(|| Error::Input("dataset has no images".into()))?;
            init_networks(Arch::for_input(h, w, c, ctx.cfg.size_tag), ctx.cfg.seed)?
        }
    };
    let ck_path = ctx.checkpoint_path();
    if let Some(parent) = ck_path.parent() {
        fs::create_dir_all(parent)?;
    }
    if hparams.steps == 0 {
        if resume.is_none() {
            return Err(Error::Config(
                "backbone.steps must be at least 1 for a fresh run".into(),
            ));
        }
        write_checkpoint(&bundle, &ck_path)?;
        println!(
            "no steps requested; checkpoint copied to {}",
            ck_path.display()
        );
        return Ok(());
    }
    let (bundle, trace) = train(bundle, trainset, &hparams)?;
    write_checkpoint(&bundle, &ck_path)?;
    let loss_path = sidecar(&ck_path, "loss.csv");
    fs::write(&loss_path, trace.to_csv())?;
    if let (Some(first), Some(last)) = (trace.records.first(), trace.records.last()) {
        println!(
            "loss {:.6} -> {:.6} over {} steps",
            first.total(),
            last.total(),
            trace.records.len()
        );
    }
    println!("wrote {} and {}", ck_path.display(), loss_path.display());
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn calibrate_cmd(ctx: &Ctx) -> Result<()> {
    let ck_path = ctx.checkpoint_path();
    let ck_bytes = fs::read(&ck_path)
        .map_err(|e| Error::Input(format!("cannot read checkpoint {}: {e}", ck_path.display())))?;
    let bundle = read_checkpoint(&ck_path)?;
    let dataset = ctx.cfg.load_dataset()?;
    let detector = calibrate(bundle, &dataset, &ctx.cfg.calibration)?;
    let stats =
        Statistics::from_detector(&detector, sha256(&ck_bytes), ctx.cfg.hash(), ctx.cfg.seed)?;
    let path = ctx.resolve(&ctx.cfg.eval.statistics);
    stats.write(&path)?;
    let sn = &detector.score_normalizer;
    println!(
        "gaussian fitted on {} train images, normalizers on {} validation images",
        detector.counts.train, detector.counts.validation
    );
    println!(
        "picturable mean {:.6} std {:.6}; unpicturable mean {:.6} std {:.6}",
        sn.picturable.mean, sn.picturable.std, sn.unpicturable.mean, sn.unpicturable.std
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn score_cmd(
    ctx: &Ctx,
    image: &Path,
    heatmap: Option<&Path>,
    raw_map: Option<&Path>,
    allow_mismatch: bool,
) -> Result<()> {
    if !image.is_file() {
        return Err(Error::Input(format!("no such image {}", image.display())));
    }
    let detector = ctx.load_detector(allow_mismatch)?;
    let (h, w, c) = detector.bundle.arch().input_shape();
    // Bring any image to the shape the networks were trained on.
    let options = LoadOptions {
        resize: Some((h, w)),
        grayscale: c == 1,
    };
    let pixels = read_image(image, &options)?;
    let scores = detector.score(&pixels)?;
    let show = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_else(|| "-".into());
    println!("picturable   {}", show(scores.picturable));
    println!("unpicturable {}", show(scores.unpicturable));
    println!("fused        {}", show(scores.fused));
    if let Some(map) = &scores.map {
        if let Some(p) = heatmap {
            write_heatmap_png(map, p, None, Some((w as u32, h as u32)))?;
        }
        if let Some(p) = raw_map {
            write_raw_map(map, p)?;
        }
    }
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, branch: BranchSelection, allow_mismatch: bool) -> Result<()> {
    let detector = ctx.load_detector(allow_mismatch)?;
    let dataset = ctx.cfg.load_dataset()?;
    let report = evaluate(&detector, &dataset, branch, ctx.cfg.eval.workers)?;
    let (json, csv) = report.write(&ctx.resolve(&ctx.cfg.eval.report))?;
    let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<14}{:>9}{:>9}{:>11}",
        "scores", "overall", "logical", "structural"
    );
    for (name, b) in &report.auroc {
        println!(
            "{name:<14}{:>9.4}{:>9}{:>11}",
            b.overall,
            show(b.logical),
            show(b.structural)
        );
    }
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn bench_cmd(ctx: &Ctx, allow_mismatch: bool) -> Result<()> {
    let detector = ctx.load_detector(allow_mismatch)?;
    let dataset = ctx.cfg.load_dataset()?;
    let images: Vec<_> = dataset
        .nonempty_split(Split::Test)?
        .iter()
        .map(|s| &s.pixels)
        .collect();
    let lat = bench(&detector, &images, ctx.cfg.eval.warmup, ctx.cfg.eval.runs)?;
    print!("{}", latency_table(&lat));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        cfg: PipelineConfig::from_file(&cli.config, cli.seed)?,
        out: cli.out,
        force: cli.force,
    };
    fs::create_dir_all(&ctx.out)?;
    match cli.command {
        Command::Generate => generate(&ctx),
        Command::Train { resume, steps } => train_cmd(&ctx, resume.as_deref(), steps),
        Command::Calibrate => calibrate_cmd(&ctx),
        Command::Score {
            image,
            heatmap,
            raw_map,
            allow_mismatch,
        } => score_cmd(
            &ctx,
            &image,
            heatmap.as_deref(),
            raw_map.as_deref(),
            allow_mismatch,
        ),
        Command::Evaluate {
            branch,
            allow_mismatch,
        } => evaluate_cmd(&ctx, branch, allow_mismatch),
        Command::Bench { allow_mismatch } => bench_cmd(&ctx, allow_mismatch),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
