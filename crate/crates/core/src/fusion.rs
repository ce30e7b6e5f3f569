//! Score standardization, fusion and AUROC.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Picturable,
    Unpicturable,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Picturable, Branch::Unpicturable];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Picturable => "picturable",
            Branch::Unpicturable => "unpicturable",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "picturable" => Ok(Branch::Picturable),
            "unpicturable" => Ok(Branch::Unpicturable),
            other => Err(Error::Lookup(format!("unknown branch {other:?}"))),
        }
    }
}

/// Mean and population standard deviation of one branch's validation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    /// Two-pass moments with divisor `n`.
    pub fn of(scores: &[f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalizer {
    pub picturable: Moments,
    pub unpicturable: Moments,
}

fn branch_moments(branch: Branch, scores: &[f64]) -> Result<Moments> {
    if scores.len() < 2 {
        return Err(Error::Calibration(format!(
            "{branch} branch needs at least 2 validation scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!(
            "{branch} validation scores contain non-finite values"
        )));
    }
    let m = Moments::of(scores).expect("non-empty");
    if !(m.std > 0.0) {
        return Err(Error::Calibration(format!(
            "{branch} validation scores have zero spread (all equal to {})",
            m.mean
        )));
    }
    Ok(m)
}

pub fn calibrate_score_normalizer(
    picturable: &[f64],
    unpicturable: &[f64],
) -> Result<ScoreNormalizer> {
    Ok(ScoreNormalizer {
        picturable: branch_moments(Branch::Picturable, picturable)?,
        unpicturable: branch_moments(Branch::Unpicturable, unpicturable)?,
    })
}

impl ScoreNormalizer {
    pub fn moments(&self, branch: Branch) -> Moments {
        match branch {
            Branch::Picturable => self.picturable,
            Branch::Unpicturable => self.unpicturable,
        }
    }

    /// `(score − μ_b) / σ_b`.
    pub fn normalize(&self, branch: Branch, score: f64) -> f64 {
        let m = self.moments(branch);
        (score - m.mean) / m.std
    }
}

pub fn fuse(z_picturable: f64, z_unpicturable: f64) -> Result<f64> {
    if !z_picturable.is_finite() || !z_unpicturable.is_finite() {
        return Err(Error::Numeric(format!(
            "cannot fuse non-finite scores ({z_picturable}, {z_unpicturable})"
        )));
    }
    Ok(z_picturable + z_unpicturable)
}

/// Area under the ROC curve, computed as the Mann–Whitney statistic from
/// mid-ranks so that ties earn half credit. `true` marks the anomalous class.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("AUROC input contains NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation(
            "AUROC needs both normal and anomalous samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares its mean rank
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        positive_rank_sum += mid_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
