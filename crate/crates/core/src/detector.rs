//! A trained backbone together with every statistic needed to score images.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneBundle, RawOutputs};
use crate::dataset::{DatasetBundle, Image, ImageSample, Split};
use crate::error::{Error, Result};
use crate::fusion::{calibrate_score_normalizer, fuse, Branch, ScoreNormalizer};
use crate::picturable::{
    calibrate_map_normalizer, combined_map, global_map, local_map, picturable_score, AnomalyMap,
    MapNormalizer, QuantileLevels,
};
use crate::unpicturable::{
    fit_gaussian, gap, score_outputs, FeatureSourceConfig, GaussianModel, Ridge,
};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CalibrationConfig {
    pub feature: FeatureSourceConfig,
    pub ridge: Ridge,
    pub quantiles: QuantileLevels,
}

/// Which scores an evaluation ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchSelection {
    #[default]
    Fused,
    PicturableOnly,
    UnpicturableOnly,
}

impl BranchSelection {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchSelection::Fused => "fused",
            BranchSelection::PicturableOnly => "picturable-only",
            BranchSelection::UnpicturableOnly => "unpicturable-only",
        }
    }

    fn runs(self, branch: Branch) -> bool {
        match (self, branch) {
            (BranchSelection::Fused, _) => true,
            (BranchSelection::PicturableOnly, b) => b == Branch::Picturable,
            (BranchSelection::UnpicturableOnly, b) => b == Branch::Unpicturable,
        }
    }
}

impl std::str::FromStr for BranchSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(BranchSelection::Fused),
            "picturable-only" => Ok(BranchSelection::PicturableOnly),
            "unpicturable-only" => Ok(BranchSelection::UnpicturableOnly),
            other => Err(Error::Config(format!(
                "unknown branch selection {other:?} (expected fused, picturable-only or unpicturable-only)"
            ))),
        }
    }
}

/// Scores of one image. Branches that were not run are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub picturable: Option<f64>,
    pub unpicturable: Option<f64>,
    pub z_picturable: Option<f64>,
    pub z_unpicturable: Option<f64>,
    pub fused: Option<f64>,
    pub map: Option<AnomalyMap>,
}

impl ImageScores {
    /// The score `selection` ranks by.
    pub fn ranking_score(&self, selection: BranchSelection) -> Option<f64> {
        match selection {
            BranchSelection::Fused => self.fused,
            BranchSelection::PicturableOnly => self.picturable,
            BranchSelection::UnpicturableOnly => self.unpicturable,
        }
    }
}

/// Wall-clock time spent in each scoring stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub forward: Duration,
    pub picturable: Duration,
    pub unpicturable: Duration,
    pub fusion: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.forward + self.picturable + self.unpicturable + self.fusion
    }
}

/// How many images each calibration step consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationCounts {
    /// Training images behind the Gaussian.
    pub train: u64,
    /// Validation images behind both normalizers.
    pub validation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub bundle: BackboneBundle,
    pub feature: FeatureSourceConfig,
    pub gaussian: GaussianModel,
    pub map_normalizer: MapNormalizer,
    pub score_normalizer: ScoreNormalizer,
    pub counts: CalibrationCounts,
}

fn normal_images(dataset: &DatasetBundle, split: Split) -> Result<Vec<&ImageSample>> {
    let samples = dataset.nonempty_split(split)?;
    if let Some(s) = samples.iter().find(|s| s.is_anomalous()) {
        return Err(Error::Contract(format!(
            "{split} split contains anomalous sample {}",
            s.id
        )));
    }
    Ok(samples.iter().collect())
}

/// Fits the Gaussian on the training split, then the map and score
/// normalizers on the validation split.
pub fn calibrate(
    bundle: BackboneBundle,
    dataset: &DatasetBundle,
    cfg: &CalibrationConfig,
) -> Result<Detector> {
    if !bundle.is_trained() {
        return Err(Error::State("backbone has not been trained".into()));
    }
    if bundle.arch().size_tag != cfg.feature.size_tag {
        return Err(Error::Config(format!(
            "backbone size {} does not match configured size {}",
            bundle.arch().size_tag,
            cfg.feature.size_tag
        )));
    }
    let source = cfg.feature.source;

    let train = normal_images(dataset, Split::Train)?;
    let vectors = train
        .iter()
        .map(|s| gap(source.select(&bundle.forward(&s.pixels)?)))
        .collect::<Result<Vec<_>>>()?;
    let gaussian = fit_gaussian(&vectors, cfg.ridge, source)?;

    let validation = normal_images(dataset, Split::Validation)?;
    let outputs = validation
        .iter()
        .map(|s| bundle.forward(&s.pixels))
        .collect::<Result<Vec<RawOutputs>>>()?;
    let mut locals = Vec::with_capacity(outputs.len());
    let mut globals = Vec::with_capacity(outputs.len());
    for o in &outputs {
        locals.push(local_map(&o.teacher_map, &o.student_former)?);
        globals.push(global_map(&o.student_latter, &o.ae_map)?);
    }
    let map_normalizer = calibrate_map_normalizer(&locals, &globals, cfg.quantiles)?;
    let mut p_scores = Vec::with_capacity(outputs.len());
    let mut u_scores = Vec::with_capacity(outputs.len());
    for ((o, l), g) in outputs.iter().zip(&locals).zip(&globals) {
        p_scores.push(picturable_score(&combined_map(l, g, &map_normalizer)?)?);
        u_scores.push(score_outputs(&gaussian, o)?);
    }
    let score_normalizer = calibrate_score_normalizer(&p_scores, &u_scores)?;
    Ok(Detector {
        bundle,
        feature: cfg.feature,
        gaussian,
        map_normalizer,
        score_normalizer,
        counts: CalibrationCounts {
            train: train.len() as u64,
            validation: validation.len() as u64,
        },
    })
}

impl Detector {
    /// Combined anomaly map of one forward pass.
    pub fn anomaly_map(&self, outputs: &RawOutputs) -> Result<AnomalyMap> {
        let l = local_map(&outputs.teacher_map, &outputs.student_former)?;
        let g = global_map(&outputs.student_latter, &outputs.ae_map)?;
        combined_map(&l, &g, &self.map_normalizer)
    }

    /// Scores one image, timing each stage. With a single-branch selection the
    /// other branch is skipped and no fused score is produced.
    pub fn score_timed(
        &self,
        image: &Image,
        selection: BranchSelection,
    ) -> Result<(ImageScores, StageTimes)> {
        let mut times = StageTimes::default();

        let t = Instant::now();
        let outputs = self.bundle.forward(image)?;
        times.forward = t.elapsed();

        let t = Instant::now();
        let (map, picturable) = if selection.runs(Branch::Picturable) {
            let map = self.anomaly_map(&outputs)?;
            let s = picturable_score(&map)?;
            (Some(map), Some(s))
        } else {
            (None, None)
        };
        times.picturable = t.elapsed();

        let t = Instant::now();
        let unpicturable = if selection.runs(Branch::Unpicturable) {
            Some(score_outputs(&self.gaussian, &outputs)?)
        } else {
            None
        };
        times.unpicturable = t.elapsed();

        let t = Instant::now();
        let z_picturable =
            picturable.map(|s| self.score_normalizer.normalize(Branch::Picturable, s));
        let z_unpicturable =
            unpicturable.map(|s| self.score_normalizer.normalize(Branch::Unpicturable, s));
        let fused = match (z_picturable, z_unpicturable) {
            (Some(p), Some(u)) => Some(fuse(p, u)?),
            _ => None,
        };
        times.fusion = t.elapsed();

        Ok((
            ImageScores {
                picturable,
                unpicturable,
                z_picturable,
                z_unpicturable,
                fused,
                map,
            },
            times,
        ))
    }

    pub fn score(&self, image: &Image) -> Result<ImageScores> {
        Ok(self.score_timed(image, BranchSelection::Fused)?.0)
    }
}
