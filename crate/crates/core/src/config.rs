//! The single configuration file shared by every command.
//!
//! ```text
//! seed = 7
//!
//! # exactly one dataset source: synth.* keys, or dataset.loco_root
//! synth.train_count = 200
//! synth.validation_count = 50
//! synth.test_normal_count = 40
//! synth.test_picturable_count = 30
//! synth.test_unpicturable_count = 30
//! # dataset.loco_root = data/breakfast_box
//! # dataset.resize = 64x64
//! # dataset.grayscale = true
//!
//! backbone.size = S                 # S | M
//! backbone.steps = 1000
//! backbone.learning_rate = 0.003
//! backbone.optimizer = adam         # adam | sgd
//! backbone.batch_size = 8
//! backbone.teacher_mode = frozen_random
//!
//! unpicturable.source = student_former   # student_former | teacher
//! unpicturable.epsilon = auto            # auto | non-negative number
//!
//! picturable.q_low = 0.9
//! picturable.q_high = 0.995
//!
//! eval.workers = 1
//! eval.warmup = 10
//! eval.runs = 100
//! eval.checkpoint = checkpoint.bin       # relative paths resolve against --out
//! eval.statistics = statistics.bin
//! eval.report = report                   # writes report.json and report.csv
//! ```
//!
//! Only the five synthetic counts (or `dataset.loco_root`) and `seed` are
//! required. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbone::{Optimizer, SizeTag, TrainHParams};
use crate::dataset::{
    generate_synthetic, load_loco_layout, DatasetBundle, LoadOptions, SynthConfig,
};
use crate::detector::CalibrationConfig;
use crate::error::{Error, Result};
use crate::kv::{parse_size, KeyValues};
use crate::picturable::QuantileLevels;
use crate::unpicturable::{FeatureSource, FeatureSourceConfig, Ridge};

/// Ridge factor behind `unpicturable.epsilon = auto`.
pub const AUTO_RIDGE_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    Loco { root: PathBuf, options: LoadOptions },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub workers: usize,
    pub warmup: usize,
    pub runs: usize,
    pub checkpoint: PathBuf,
    pub statistics: PathBuf,
    /// Report path without extension.
    pub report: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            warmup: 10,
            runs: 100,
            checkpoint: "checkpoint.bin".into(),
            statistics: "statistics.bin".into(),
            report: "report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub size_tag: SizeTag,
    pub train: TrainHParams,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean '{v}' for key '{key}'"
        ))),
    }
}

fn dataset_from_kv(kv: &mut KeyValues, seed: u64) -> Result<DatasetSource> {
    let mut synth = kv.take_section("synth");
    let mut loco = kv.take_section("dataset");
    match (synth.is_empty(), loco.is_empty()) {
        (false, false) => Err(Error::Config(
            "both synth.* and dataset.* keys are set; configure exactly one dataset source".into(),
        )),
        (true, true) => Err(Error::Config(
            "no dataset configured: set the synth.* counts or dataset.loco_root".into(),
        )),
        (false, true) => {
            let cfg = SynthConfig::from_kv(&mut synth, Some(seed))?;
            synth.finish()?;
            cfg.validate()?;
            Ok(DatasetSource::Synthetic(cfg))
        }
        (true, false) => {
            let root: PathBuf = loco.require::<String>("loco_root")?.into();
            let resize = match loco.take("resize") {
                None => None,
                Some(s) => Some(parse_size(&s).ok_or_else(|| {
                    Error::Config(format!(
                        "invalid value '{s}' for key 'dataset.resize', expected HxW"
                    ))
                })?),
            };
            let grayscale = match loco.take("grayscale") {
                None => false,
                Some(v) => parse_bool("dataset.grayscale", &v)?,
            };
            loco.finish()?;
            Ok(DatasetSource::Loco {
                root,
                options: LoadOptions { resize, grayscale },
            })
        }
    }
}

fn train_from_kv(kv: &mut KeyValues, seed: u64) -> Result<(SizeTag, TrainHParams)> {
    let mut bb = kv.take_section("backbone");
    let size_tag = bb.take_parsed("size")?.unwrap_or_default();
    let mut hp = TrainHParams {
        seed,
        ..TrainHParams::default()
    };
    if let Some(v) = bb.take_parsed("steps")? {
        hp.steps = v;
    }
    if let Some(v) = bb.take_parsed("learning_rate")? {
        hp.learning_rate = v;
    }
    if let Some(v) = bb.take_parsed("batch_size")? {
        hp.batch_size = v;
    }
    if let Some(v) = bb.take_parsed("teacher_mode")? {
        hp.teacher_mode = v;
    }
    let kind = bb.take("optimizer").unwrap_or_else(|| "adam".into());
    hp.optimizer = match kind.as_str() {
        "adam" => {
            let Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } = Optimizer::default()
            else {
                unreachable!("default optimizer is Adam")
            };
            Optimizer::Adam {
                beta1: bb.take_parsed("beta1")?.unwrap_or(beta1),
                beta2: bb.take_parsed("beta2")?.unwrap_or(beta2),
                epsilon: bb.take_parsed("adam_epsilon")?.unwrap_or(epsilon),
            }
        }
        "sgd" => Optimizer::Sgd {
            momentum: bb.take_parsed("momentum")?.unwrap_or(0.9),
        },
        other => {
            return Err(Error::Config(format!(
                "invalid value '{other}' for key 'backbone.optimizer' (expected adam or sgd)"
            )))
        }
    };
    bb.finish()?;
    if hp.steps == 0 {
        return Err(Error::Config("backbone.steps must be at least 1".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::Config(
            "backbone.batch_size must be at least 1".into(),
        ));
    }
    if !(hp.learning_rate > 0.0) || !hp.learning_rate.is_finite() {
        return Err(Error::Config(
            "backbone.learning_rate must be positive".into(),
        ));
    }
    Ok((size_tag, hp))
}

fn calibration_from_kv(kv: &mut KeyValues, size_tag: SizeTag) -> Result<CalibrationConfig> {
    let mut up = kv.take_section("unpicturable");
    let source: FeatureSource = up.take_parsed("source")?.unwrap_or_default();
    let ridge = match up.take("epsilon").as_deref() {
        None | Some("auto") => Ridge::TraceScaled(AUTO_RIDGE_FACTOR),
        Some(v) => {
            let e: f64 = v.parse().map_err(|_| {
                Error::Config(format!(
                    "invalid value '{v}' for key 'unpicturable.epsilon' (auto or a number)"
                ))
            })?;
            if !e.is_finite() || e < 0.0 {
                return Err(Error::Config(format!(
                    "unpicturable.epsilon must be >= 0, got {e}"
                )));
            }
            Ridge::Fixed(e)
        }
    };
    up.finish()?;

    let mut pc = kv.take_section("picturable");
    let defaults = QuantileLevels::default();
    let quantiles = QuantileLevels {
        low: pc.take_parsed("q_low")?.unwrap_or(defaults.low),
        high: pc.take_parsed("q_high")?.unwrap_or(defaults.high),
    };
    pc.finish()?;
    quantiles.validate()?;

    Ok(CalibrationConfig {
        feature: FeatureSourceConfig { source, size_tag },
        ridge,
        quantiles,
    })
}

fn eval_from_kv(kv: &mut KeyValues) -> Result<EvalConfig> {
    let mut ev = kv.take_section("eval");
    let mut cfg = EvalConfig::default();
    if let Some(v) = ev.take_parsed("workers")? {
        cfg.workers = v;
    }
    if let Some(v) = ev.take_parsed("warmup")? {
        cfg.warmup = v;
    }
    if let Some(v) = ev.take_parsed("runs")? {
        cfg.runs = v;
    }
    for (key, slot) in [
        ("checkpoint", &mut cfg.checkpoint),
        ("statistics", &mut cfg.statistics),
        ("report", &mut cfg.report),
    ] {
        if let Some(v) = ev.take(key) {
            *slot = v.into();
        }
    }
    ev.finish()?;
    if cfg.workers == 0 || cfg.runs == 0 {
        return Err(Error::Config(
            "eval.workers and eval.runs must be at least 1".into(),
        ));
    }
    Ok(cfg)
}

impl PipelineConfig {
    /// Parses config text. `seed_override` (the `--seed` flag) replaces the
    /// file's `seed`, which is otherwise required.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let file_seed: Option<u64> = kv.take_parsed("seed")?;
        let seed = seed_override
            .or(file_seed)
            .ok_or_else(|| Error::Config("missing required key 'seed' (or pass --seed)".into()))?;
        let dataset = dataset_from_kv(&mut kv, seed)?;
        let (size_tag, train) = train_from_kv(&mut kv, seed)?;
        let calibration = calibration_from_kv(&mut kv, size_tag)?;
        let eval = eval_from_kv(&mut kv)?;
        kv.finish()?;
        Ok(Self {
            seed,
            dataset,
            size_tag,
            train,
            calibration,
            eval,
        })
    }

    pub fn from_file(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, seed_override)
    }

    /// Canonical text with every default spelled out; parsing it yields an
    /// equal config.
    pub fn render(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("seed", self.seed.to_string());
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                let synth = KeyValues::parse(&s.render()).expect("rendered synth config parses");
                for (k, v) in synth.into_map() {
                    kv.insert(format!("synth.{k}"), v);
                }
            }
            DatasetSource::Loco { root, options } => {
                kv.insert("dataset.loco_root", root.display().to_string());
                if let Some((h, w)) = options.resize {
                    kv.insert("dataset.resize", format!("{h}x{w}"));
                }
                kv.insert("dataset.grayscale", options.grayscale.to_string());
            }
        }
        let t = &self.train;
        kv.insert("backbone.size", self.size_tag.to_string());
        kv.insert("backbone.steps", t.steps.to_string());
        kv.insert("backbone.learning_rate", t.learning_rate.to_string());
        kv.insert("backbone.batch_size", t.batch_size.to_string());
        kv.insert("backbone.teacher_mode", t.teacher_mode.to_string());
        match t.optimizer {
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                kv.insert("backbone.optimizer", "adam");
                kv.insert("backbone.beta1", beta1.to_string());
                kv.insert("backbone.beta2", beta2.to_string());
                kv.insert("backbone.adam_epsilon", epsilon.to_string());
            }
            Optimizer::Sgd { momentum } => {
                kv.insert("backbone.optimizer", "sgd");
                kv.insert("backbone.momentum", momentum.to_string());
            }
        }
        let c = &self.calibration;
        kv.insert("unpicturable.source", c.feature.source.to_string());
        kv.insert(
            "unpicturable.epsilon",
            match c.ridge {
                Ridge::TraceScaled(_) => "auto".to_string(),
                Ridge::Fixed(e) => e.to_string(),
            },
        );
        kv.insert("picturable.q_low", c.quantiles.low.to_string());
        kv.insert("picturable.q_high", c.quantiles.high.to_string());
        let e = &self.eval;
        kv.insert("eval.workers", e.workers.to_string());
        kv.insert("eval.warmup", e.warmup.to_string());
        kv.insert("eval.runs", e.runs.to_string());
        kv.insert("eval.checkpoint", e.checkpoint.display().to_string());
        kv.insert("eval.statistics", e.statistics.display().to_string());
        kv.insert("eval.report", e.report.display().to_string());
        kv.render()
    }

    /// SHA-256 of [`PipelineConfig::render`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.render().as_bytes()).into()
    }

    /// Generates or loads the configured dataset.
    pub fn load_dataset(&self) -> Result<DatasetBundle> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => generate_synthetic(s),
            DatasetSource::Loco { root, options } => load_loco_layout(root, options),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 3
synth.train_count = 4
synth.validation_count = 2
synth.test_normal_count = 1
synth.test_picturable_count = 1
synth.test_unpicturable_count = 1
";

    #[test]
    fn defaults_fill_in() {
        let c = PipelineConfig::parse(MINIMAL, None).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.size_tag, SizeTag::S);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.train.optimizer, Optimizer::default());
        assert_eq!(c.calibration.ridge, Ridge::TraceScaled(1e-3));
        assert_eq!(c.calibration.feature.source, FeatureSource::StudentFormer);
        assert_eq!(c.eval, EvalConfig::default());
        let DatasetSource::Synthetic(s) = &c.dataset else {
            panic!()
        };
        assert_eq!(s.seed, 3);
    }

    #[test]
    fn seed_flag_overrides() {
        let c = PipelineConfig::parse(MINIMAL, Some(11)).unwrap();
        assert_eq!(c.seed, 11);
        let no_seed = MINIMAL.replace("seed = 3\n", "");
        assert!(PipelineConfig::parse(&no_seed, None).is_err());
        assert_eq!(PipelineConfig::parse(&no_seed, Some(2)).unwrap().seed, 2);
    }

    #[test]
    fn render_round_trips() {
        let text = format!(
            "{MINIMAL}backbone.size = M\nbackbone.optimizer = sgd\nbackbone.momentum = 0.5\n\
             unpicturable.epsilon = 0.01\nunpicturable.source = teacher\npicturable.q_low = 0.5\neval.workers = 2\n"
        );
        let c = PipelineConfig::parse(&text, None).unwrap();
        let back = PipelineConfig::parse(&c.render(), None).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(
            PipelineConfig::parse(MINIMAL, None).unwrap().hash(),
            c.hash()
        );
    }

    #[test]
    fn errors_name_the_key() {
        let err = PipelineConfig::parse(&MINIMAL.replace("synth.train_count = 4\n", ""), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("synth.train_count"), "{err}");
        let err = PipelineConfig::parse(&format!("{MINIMAL}backbone.stepz = 3\n"), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("backbone.stepz"), "{err}");
        let err = PipelineConfig::parse(
            &format!("{MINIMAL}unpicturable.source = autoencoder\n"),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn exactly_one_dataset_source() {
        let both = format!("{MINIMAL}dataset.loco_root = x\n");
        assert!(PipelineConfig::parse(&both, None).is_err());
        assert!(PipelineConfig::parse("seed = 1\n", None).is_err());
        let loco = PipelineConfig::parse(
            "seed = 1\ndataset.loco_root = /d\ndataset.resize = 32x32\n",
            None,
        )
        .unwrap();
        assert_eq!(
            loco.dataset,
            DatasetSource::Loco {
                root: "/d".into(),
                options: LoadOptions {
                    resize: Some((32, 32)),
                    grayscale: false
                }
            }
        );
    }
}
