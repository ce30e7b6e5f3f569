//! Desk-scale generator reproducing the picturable / unpicturable split.
//!
//! Normal images show `k` uniform discs on a noisy background, `k` drawn from
//! the configured count range, at random non-overlapping positions. A
//! structural anomaly inverts a small patch inside one disc. A logical anomaly
//! uses a count outside the range, every disc individually normal: there is no
//! location at which the image looks wrong.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnomalyFamily, DatasetBundle, Image, ImageSample, Label, Split};
use crate::error::{Error, Result};
use crate::kv::{parse_size, KeyValues};

const BACKGROUND_LEVEL: i32 = 48;
const BACKGROUND_NOISE: i32 = 16;
const DISC_LEVEL: u8 = 200;
/// Minimum free pixels between two discs.
const DISC_GAP: usize = 3;
const PLACEMENT_RESTARTS: usize = 200;
const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub category: String,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// Inclusive object-count range for normal images.
    pub object_count: (usize, usize),
    pub disc_radius: usize,
    /// Blend toward the inverted intensity inside a defect, in `(0, 1]`.
    pub defect_intensity: f64,
    pub train_count: usize,
    pub validation_count: usize,
    pub test_normal_count: usize,
    pub test_picturable_count: usize,
    pub test_unpicturable_count: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Defaults for everything except counts and seed.
    pub fn with_counts(
        train: usize,
        validation: usize,
        test_normal: usize,
        test_picturable: usize,
        test_unpicturable: usize,
        seed: u64,
    ) -> Self {
        Self {
            category: "synthetic".into(),
            image_size: (64, 64),
            object_count: (3, 3),
            disc_radius: 6,
            defect_intensity: 1.0,
            train_count: train,
            validation_count: validation,
            test_normal_count: test_normal,
            test_picturable_count: test_picturable,
            test_unpicturable_count: test_unpicturable,
            seed,
        }
    }

    /// Reads the keys of a synthesis config. Counts are mandatory; `seed` falls
    /// back to `default_seed` when given. Leftover keys are left in `kv`.
    pub fn from_kv(kv: &mut KeyValues, default_seed: Option<u64>) -> Result<Self> {
        let mut cfg = Self::with_counts(0, 0, 0, 0, 0, 0);
        if let Some(c) = kv.take("category") {
            cfg.category = c;
        }
        if let Some(s) = kv.take("image_size") {
            cfg.image_size = parse_size(&s)
                .ok_or_else(|| Error::Config(format!("invalid image_size '{s}', expected HxW")))?;
        }
        let lo = kv
            .take_parsed("object_count_min")?
            .unwrap_or(cfg.object_count.0);
        let hi = kv
            .take_parsed("object_count_max")?
            .unwrap_or(cfg.object_count.1);
        cfg.object_count = (lo, hi);
        if let Some(r) = kv.take_parsed("disc_radius")? {
            cfg.disc_radius = r;
        }
        if let Some(d) = kv.take_parsed("defect_intensity")? {
            cfg.defect_intensity = d;
        }
        cfg.train_count = kv.require("train_count")?;
        cfg.validation_count = kv.require("validation_count")?;
        cfg.test_normal_count = kv.require("test_normal_count")?;
        cfg.test_picturable_count = kv.require("test_picturable_count")?;
        cfg.test_unpicturable_count = kv.require("test_unpicturable_count")?;
        cfg.seed = match (kv.take_parsed("seed")?, default_seed) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => return Err(Error::Config("missing required key 'seed'".into())),
        };
        Ok(cfg)
    }

    /// Parses a standalone synthesis config file; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::from_kv(&mut kv, None)?;
        kv.finish()?;
        Ok(cfg)
    }

    /// Renders the config in the same format [`SynthConfig::parse`] reads.
    pub fn render(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("category", &self.category);
        kv.insert(
            "image_size",
            format!("{}x{}", self.image_size.0, self.image_size.1),
        );
        kv.insert("object_count_min", self.object_count.0.to_string());
        kv.insert("object_count_max", self.object_count.1.to_string());
        kv.insert("disc_radius", self.disc_radius.to_string());
        kv.insert("defect_intensity", self.defect_intensity.to_string());
        kv.insert("train_count", self.train_count.to_string());
        kv.insert("validation_count", self.validation_count.to_string());
        kv.insert("test_normal_count", self.test_normal_count.to_string());
        kv.insert(
            "test_picturable_count",
            self.test_picturable_count.to_string(),
        );
        kv.insert(
            "test_unpicturable_count",
            self.test_unpicturable_count.to_string(),
        );
        kv.insert("seed", self.seed.to_string());
        kv.render()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("train_count", self.train_count),
            ("validation_count", self.validation_count),
            ("test_normal_count", self.test_normal_count),
            ("test_picturable_count", self.test_picturable_count),
            ("test_unpicturable_count", self.test_unpicturable_count),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.validation_count < 2 {
            return Err(Error::Config(
                "validation_count must be at least 2 to calibrate normalizers".into(),
            ));
        }
        let (lo, hi) = self.object_count;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "invalid object count range [{lo}, {hi}]"
            )));
        }
        if self.disc_radius == 0 {
            return Err(Error::Config("disc_radius must be positive".into()));
        }
        if !(self.defect_intensity > 0.0 && self.defect_intensity <= 1.0) {
            return Err(Error::Config(format!(
                "defect_intensity must lie in (0, 1], got {}",
                self.defect_intensity
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }

    /// Counts a logical anomaly may use: just below and just above the range.
    fn anomalous_counts(&self) -> Vec<usize> {
        let (lo, hi) = self.object_count;
        let mut v = Vec::with_capacity(2);
        if lo > 1 {
            v.push(lo - 1);
        }
        v.push(hi + 1);
        v
    }

    fn max_objects_needed(&self) -> usize {
        self.object_count.1 + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    cy: usize,
    cx: usize,
}

struct Canvas<'a> {
    cfg: &'a SynthConfig,
    /// Every grid position a disc center may take without overlap, spaced at
    /// the minimum center distance. Used for the capacity check and as a
    /// fallback when rejection sampling jams.
    lattice: Vec<Disc>,
}

impl<'a> Canvas<'a> {
    fn new(cfg: &'a SynthConfig) -> Result<Self> {
        let r = cfg.disc_radius;
        let (h, w) = cfg.image_size;
        if h < 2 * r + 3 || w < 2 * r + 3 {
            return Err(Error::Generation(format!(
                "a disc of radius {r} does not fit in a {h}x{w} image"
            )));
        }
        let step = 2 * r + 1 + DISC_GAP;
        let mut lattice = Vec::new();
        let mut cy = r + 1;
        while cy + r + 1 < h {
            let mut cx = r + 1;
            while cx + r + 1 < w {
                lattice.push(Disc { cy, cx });
                cx += step;
            }
            cy += step;
        }
        let need = cfg.max_objects_needed();
        if need > lattice.len() {
            return Err(Error::Generation(format!(
                "cannot place {need} discs of radius {r} in a {h}x{w} image (capacity {})",
                lattice.len()
            )));
        }
        Ok(Self { cfg, lattice })
    }

    fn place(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<Disc> {
        let r = self.cfg.disc_radius;
        let (h, w) = self.cfg.image_size;
        let min_d2 = ((2 * r + 1 + DISC_GAP) * (2 * r + 1 + DISC_GAP)) as i64;
        'restart: for _ in 0..PLACEMENT_RESTARTS {
            let mut discs: Vec<Disc> = Vec::with_capacity(k);
            while discs.len() < k {
                let mut placed = false;
                for _ in 0..PLACEMENT_TRIES {
                    let cand = Disc {
                        cy: rng.random_range(r + 1..h - r - 1),
                        cx: rng.random_range(r + 1..w - r - 1),
                    };
                    let clear = discs.iter().all(|d| {
                        let dy = d.cy as i64 - cand.cy as i64;
                        let dx = d.cx as i64 - cand.cx as i64;
                        dy * dy + dx * dx >= min_d2
                    });
                    if clear {
                        discs.push(cand);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    continue 'restart;
                }
            }
            return discs;
        }
        let mut lattice = self.lattice.clone();
        lattice.shuffle(rng);
        lattice.truncate(k);
        lattice
    }

    fn render(&self, discs: &[Disc], defect: bool, rng: &mut ChaCha8Rng) -> Result<Image> {
        let (h, w) = self.cfg.image_size;
        let r = self.cfg.disc_radius as i64;
        let mut px: Vec<u8> = (0..h * w)
            .map(|_| {
                (BACKGROUND_LEVEL + rng.random_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE)) as u8
            })
            .collect();
        for d in discs {
            for_each_disc_pixel(d, r, |y, x| px[y * w + x] = DISC_LEVEL);
        }
        if defect {
            let target = discs[rng.random_range(0..discs.len())];
            let side = (r * 3 / 4).max(2);
            let reach = (r / 3).max(1);
            let oy = rng.random_range(-reach..=reach);
            let ox = rng.random_range(-reach..=reach);
            let top = target.cy as i64 + oy - side / 2;
            let left = target.cx as i64 + ox - side / 2;
            let v = f64::from(DISC_LEVEL);
            let inverted = 255.0 - v;
            let value = (v + self.cfg.defect_intensity * (inverted - v)).round() as u8;
            for_each_disc_pixel(&target, r, |y, x| {
                let (y, x) = (y as i64, x as i64);
                if y >= top && y < top + side && x >= left && x < left + side {
                    px[y as usize * w + x as usize] = value;
                }
            });
        }
        Image::from_u8(h, w, 1, &px)
    }
}

fn for_each_disc_pixel(d: &Disc, r: i64, mut f: impl FnMut(usize, usize)) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                f((d.cy as i64 + dy) as usize, (d.cx as i64 + dx) as usize);
            }
        }
    }
}

/// Generates a full bundle. Output is a pure function of `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let canvas = Canvas::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lo, hi) = config.object_count;
    let anomalous_counts = config.anomalous_counts();

    let make =
        |split: Split, label: Label, index: usize, rng: &mut ChaCha8Rng| -> Result<ImageSample> {
            let k = if label == Label::Logical {
                anomalous_counts[rng.random_range(0..anomalous_counts.len())]
            } else {
                rng.random_range(lo..=hi)
            };
            let discs = canvas.place(k, rng);
            let pixels = canvas.render(&discs, label == Label::Structural, rng)?;
            let family = match label {
                Label::Normal => None,
                Label::Structural => Some(AnomalyFamily::Picturable),
                Label::Logical => Some(AnomalyFamily::Unpicturable),
            };
            Ok(ImageSample {
                id: format!("{split}/{}/{index:03}", label.dir_name()),
                pixels,
                label,
                anomaly_family: family,
                split,
                category: config.category.clone(),
            })
        };

    let mut splits = BTreeMap::new();
    let train = (0..config.train_count)
        .map(|i| make(Split::Train, Label::Normal, i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    splits.insert(Split::Train, train);
    let validation = (0..config.validation_count)
        .map(|i| make(Split::Validation, Label::Normal, i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    splits.insert(Split::Validation, validation);

    // Same order the directory loader produces: good, logical, structural.
    let mut test = Vec::new();
    for i in 0..config.test_normal_count {
        test.push(make(Split::Test, Label::Normal, i, &mut rng)?);
    }
    for i in 0..config.test_unpicturable_count {
        test.push(make(Split::Test, Label::Logical, i, &mut rng)?);
    }
    for i in 0..config.test_picturable_count {
        test.push(make(Split::Test, Label::Structural, i, &mut rng)?);
    }
    splits.insert(Split::Test, test);

    DatasetBundle::new(config.category.clone(), splits, Some(config.clone()))
}
