//! Anomaly maps from paired network outputs and the map-maximum score.
//!
//! The local map compares teacher and student former half, the global map
//! compares student latter half and autoencoder. Each entry is the channel
//! mean of squared differences at that location. Before combining, each map
//! kind is rescaled so that its validation quantiles `q_low` and `q_high` land
//! on 0 and 0.1; negative values are clamped to 0 and the two maps averaged.

mod export;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub use export::{read_raw_map, write_heatmap_png, write_raw_map, RAW_MAP_MAGIC, RAW_MAP_VERSION};

/// Value the upper quantile is mapped to.
pub const HIGH_TARGET: f64 = 0.1;

/// Non-negative `H × W` map of per-location anomaly evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Input(format!(
                "anomaly map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(
                "anomaly map entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn squared_difference_map(a: &FeatureMap, b: &FeatureMap) -> Result<AnomalyMap> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "map shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = a.shape();
    let n = h * w;
    let mut values = vec![0.0f64; n];
    for ch in 0..c {
        for ((acc, &x), &y) in values.iter_mut().zip(a.channel(ch)).zip(b.channel(ch)) {
            let d = f64::from(x) - f64::from(y);
            *acc += d * d;
        }
    }
    if c > 0 {
        values.iter_mut().for_each(|v| *v /= c as f64);
    }
    AnomalyMap::new(h, w, values)
}

/// Channel-mean squared difference of teacher and student former half.
pub fn local_map(teacher_map: &FeatureMap, student_former: &FeatureMap) -> Result<AnomalyMap> {
    squared_difference_map(teacher_map, student_former)
}

/// Channel-mean squared difference of student latter half and autoencoder.
pub fn global_map(student_latter: &FeatureMap, ae_map: &FeatureMap) -> Result<AnomalyMap> {
    squared_difference_map(student_latter, ae_map)
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `q·(n−1)` in the sorted sample).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevels {
    pub low: f64,
    pub high: f64,
}

impl Default for QuantileLevels {
    fn default() -> Self {
        Self {
            low: 0.9,
            high: 0.995,
        }
    }
}

impl QuantileLevels {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.low)
            || !(0.0..=1.0).contains(&self.high)
            || self.low >= self.high
        {
            return Err(Error::Config(format!(
                "quantile levels must satisfy 0 <= low < high <= 1, got ({}, {})",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// `(q_low, q_high)` values of one map kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub low: f64,
    pub high: f64,
}

impl QuantilePair {
    fn rescale(&self, v: f64) -> f64 {
        (HIGH_TARGET * (v - self.low) / (self.high - self.low)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapNormalizer {
    levels: QuantileLevels,
    local: Option<QuantilePair>,
    global: Option<QuantilePair>,
}

impl MapNormalizer {
    /// Uncalibrated normalizer; [`combined_map`] refuses it.
    pub fn new(levels: QuantileLevels) -> Self {
        Self {
            levels,
            local: None,
            global: None,
        }
    }

    /// Restores a normalizer from stored quantile values.
    pub fn from_parts(
        levels: QuantileLevels,
        local: QuantilePair,
        global: QuantilePair,
    ) -> Result<Self> {
        levels.validate()?;
        for (kind, p) in [("local", local), ("global", global)] {
            if !(p.high > p.low) {
                return Err(Error::Calibration(format!(
                    "{kind} map quantiles must satisfy q_high > q_low, got ({}, {})",
                    p.low, p.high
                )));
            }
        }
        Ok(Self {
            levels,
            local: Some(local),
            global: Some(global),
        })
    }

    pub fn levels(&self) -> QuantileLevels {
        self.levels
    }

    pub fn local(&self) -> Option<QuantilePair> {
        self.local
    }

    pub fn global(&self) -> Option<QuantilePair> {
        self.global
    }

    pub fn is_calibrated(&self) -> bool {
        self.local.is_some() && self.global.is_some()
    }

    fn pair_for(levels: QuantileLevels, kind: &str, maps: &[AnomalyMap]) -> Result<QuantilePair> {
        let mut pooled: Vec<f64> = maps
            .iter()
            .flat_map(|m| m.values().iter().copied())
            .collect();
        if pooled.is_empty() {
            return Err(Error::Calibration(format!(
                "no {kind} map entries to calibrate on"
            )));
        }
        pooled.sort_by(f64::total_cmp);
        let pair = QuantilePair {
            low: quantile(&pooled, levels.low),
            high: quantile(&pooled, levels.high),
        };
        if !(pair.high > pair.low) {
            return Err(Error::Calibration(format!(
                "degenerate {kind} validation maps: q_high == q_low == {}",
                pair.low
            )));
        }
        Ok(pair)
    }

    /// Estimates both quantile pairs from maps of normal validation images.
    pub fn calibrate(
        &mut self,
        local_maps: &[AnomalyMap],
        global_maps: &[AnomalyMap],
    ) -> Result<()> {
        self.levels.validate()?;
        if local_maps.len() < 2 || global_maps.len() < 2 {
            return Err(Error::Calibration(
                "map normalization needs at least 2 validation images".into(),
            ));
        }
        self.local = Some(Self::pair_for(self.levels, "local", local_maps)?);
        self.global = Some(Self::pair_for(self.levels, "global", global_maps)?);
        Ok(())
    }
}

/// Calibrates a fresh [`MapNormalizer`].
pub fn calibrate_map_normalizer(
    local_maps: &[AnomalyMap],
    global_maps: &[AnomalyMap],
    levels: QuantileLevels,
) -> Result<MapNormalizer> {
    let mut n = MapNormalizer::new(levels);
    n.calibrate(local_maps, global_maps)?;
    Ok(n)
}

/// Rescales both maps by their calibrated quantiles and averages them.
pub fn combined_map(
    local: &AnomalyMap,
    global: &AnomalyMap,
    normalizer: &MapNormalizer,
) -> Result<AnomalyMap> {
    let (Some(lp), Some(gp)) = (normalizer.local, normalizer.global) else {
        return Err(Error::State("map normalizer is not calibrated".into()));
    };
    if (local.height, local.width) != (global.height, global.width) {
        return Err(Error::Input(format!(
            "map shapes differ: {}x{} vs {}x{}",
            local.height, local.width, global.height, global.width
        )));
    }
    let values = local
        .values
        .iter()
        .zip(&global.values)
        .map(|(&l, &g)| 0.5 * (lp.rescale(l) + gp.rescale(g)))
        .collect();
    AnomalyMap::new(local.height, local.width, values)
}

/// Maximum entry of the map.
pub fn picturable_score(map: &AnomalyMap) -> Result<f64> {
    map.values
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Input("cannot score an empty anomaly map".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> FeatureMap {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(f).collect()).unwrap()
    }

    fn random_fm(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let v = (0..c * h * w)
            .map(|_| rng.random_range(-2.0f32..2.0))
            .collect();
        FeatureMap::from_vec(c, h, w, v).unwrap()
    }

    fn loop_oracle(a: &FeatureMap, b: &FeatureMap) -> Vec<f64> {
        let (c, h, w) = a.shape();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ch in 0..c {
                    let d = f64::from(a.get(ch, y, x)) - f64::from(b.get(ch, y, x));
                    s += d * d;
                }
                out.push(s / c as f64);
            }
        }
        out
    }

    fn map(h: usize, w: usize, v: Vec<f64>) -> AnomalyMap {
        AnomalyMap::new(h, w, v).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero_maps() {
        let a = fm(3, 4, 5, |i| i as f32 * 0.1);
        assert!(local_map(&a, &a)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(global_map(&a, &a)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn constant_difference_squares() {
        let a = fm(1, 3, 3, |_| 1.0);
        let b = fm(1, 3, 3, |_| 3.0);
        assert!(local_map(&a, &b)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 4.0));
        let d = 0.75f32;
        let c = fm(4, 2, 2, |_| 1.0 + d);
        let e = fm(4, 2, 2, |_| 1.0);
        for &v in global_map(&c, &e).unwrap().values() {
            assert!((v - f64::from(d) * f64::from(d)).abs() < 1e-12);
        }
    }

    #[test]
    fn maps_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = random_fm(6, 5, 7, &mut rng);
            let b = random_fm(6, 5, 7, &mut rng);
            let oracle = loop_oracle(&a, &b);
            for f in [local_map, global_map] {
                let got = f(&a, &b).unwrap();
                for (x, y) in got.values().iter().zip(&oracle) {
                    assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = fm(2, 3, 3, |_| 0.0);
        let b = fm(2, 3, 4, |_| 0.0);
        assert!(matches!(local_map(&a, &b), Err(Error::Input(_))));
        assert!(matches!(global_map(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn degenerate_validation_maps() {
        let maps = vec![map(2, 2, vec![0.3; 4]), map(2, 2, vec![0.3; 4])];
        let err = calibrate_map_normalizer(&maps, &maps, QuantileLevels::default()).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
    }

    #[test]
    fn too_few_validation_maps() {
        let maps = vec![map(2, 2, vec![0.1, 0.2, 0.3, 0.4])];
        assert!(calibrate_map_normalizer(&maps, &maps, QuantileLevels::default()).is_err());
    }

    #[test]
    fn uniform_entries_give_nominal_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps: Vec<AnomalyMap> = (0..40)
            .map(|_| {
                map(
                    25,
                    25,
                    (0..625).map(|_| rng.random_range(0.0..1.0)).collect(),
                )
            })
            .collect();
        let n = calibrate_map_normalizer(&maps, &maps, QuantileLevels::default()).unwrap();
        let p = n.local().unwrap();
        // 25 000 uniform draws: sampling error of a quantile is ~ sqrt(q(1-q)/n)
        assert!((p.low - 0.9).abs() < 0.01, "{}", p.low);
        assert!((p.high - 0.995).abs() < 0.003, "{}", p.high);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.0), 0.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
        assert_eq!(quantile(&s, 0.5), 2.0);
        assert!((quantile(&s, 0.9) - 3.6).abs() < 1e-12);
    }

    #[test]
    fn pooling_is_over_the_entry_multiset() {
        let a = map(1, 4, vec![0.1, 0.9, 0.3, 0.7]);
        let b = map(1, 4, vec![0.2, 0.4, 0.8, 0.5]);
        // same entries regrouped across two maps
        let c = map(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        let d = map(1, 4, vec![0.5, 0.7, 0.8, 0.9]);
        let lv = QuantileLevels {
            low: 0.3,
            high: 0.8,
        };
        let x = calibrate_map_normalizer(&[a.clone(), b.clone()], &[a, b], lv).unwrap();
        let y = calibrate_map_normalizer(&[d.clone(), c.clone()], &[c, d], lv).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn combined_map_arithmetic() {
        let n = MapNormalizer::from_parts(
            QuantileLevels::default(),
            QuantilePair {
                low: 0.0,
                high: 1.0,
            },
            QuantilePair {
                low: 0.0,
                high: 2.0,
            },
        )
        .unwrap();
        let zero = map(2, 2, vec![0.0; 4]);
        assert!(combined_map(&zero, &zero, &n)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));

        let n = MapNormalizer::from_parts(
            QuantileLevels::default(),
            QuantilePair {
                low: 0.2,
                high: 0.6,
            },
            QuantilePair {
                low: 0.1,
                high: 0.5,
            },
        )
        .unwrap();
        // local at q_high -> 0.1, global at q_low -> 0
        let c = combined_map(&map(1, 1, vec![0.6]), &map(1, 1, vec![0.1]), &n).unwrap();
        assert!((c.values()[0] - 0.05).abs() < 1e-15);
        // below q_low clamps to zero
        let c = combined_map(&map(1, 1, vec![0.0]), &map(1, 1, vec![0.0]), &n).unwrap();
        assert_eq!(c.values()[0], 0.0);
    }

    #[test]
    fn combined_map_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lp = QuantilePair {
            low: 0.15,
            high: 0.8,
        };
        let gp = QuantilePair {
            low: 0.05,
            high: 0.4,
        };
        let n = MapNormalizer::from_parts(QuantileLevels::default(), lp, gp).unwrap();
        let l = map(6, 6, (0..36).map(|_| rng.random_range(0.0..1.5)).collect());
        let g = map(6, 6, (0..36).map(|_| rng.random_range(0.0..1.5)).collect());
        let got = combined_map(&l, &g, &n).unwrap();
        for i in 0..36 {
            let a = (0.1 * (l.values()[i] - 0.15) / 0.65).max(0.0);
            let b = (0.1 * (g.values()[i] - 0.05) / 0.35).max(0.0);
            assert!((got.values()[i] - (a + b) / 2.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn uncalibrated_normalizer_is_state_error() {
        let m = map(1, 1, vec![0.0]);
        let n = MapNormalizer::new(QuantileLevels::default());
        assert!(matches!(combined_map(&m, &m, &n), Err(Error::State(_))));
    }

    #[test]
    fn score_is_maximum() {
        assert_eq!(picturable_score(&map(2, 2, vec![0.0; 4])).unwrap(), 0.0);
        assert_eq!(picturable_score(&map(1, 1, vec![5.0])).unwrap(), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut best = v[0];
        for &x in &v {
            if x > best {
                best = x;
            }
        }
        assert_eq!(picturable_score(&map(10, 10, v)).unwrap(), best);
        assert!(matches!(
            picturable_score(&map(0, 0, vec![])),
            Err(Error::Input(_))
        ));
    }

    proptest! {
        #[test]
        fn maps_nonnegative_and_zero_only_where_equal(
            a in proptest::collection::vec(-3.0f32..3.0, 2 * 3 * 3),
            mask in proptest::collection::vec(any::<bool>(), 3 * 3),
        ) {
            let a = FeatureMap::from_vec(2, 3, 3, a).unwrap();
            // b equals a at masked locations and differs elsewhere
            let mut b = a.clone();
            for ch in 0..2 {
                for i in 0..9 {
                    if !mask[i] {
                        let v = b.get(ch, i / 3, i % 3);
                        b.set(ch, i / 3, i % 3, v + 0.5);
                    }
                }
            }
            let m = local_map(&a, &b).unwrap();
            for i in 0..9 {
                prop_assert!(m.values()[i] >= 0.0);
                prop_assert_eq!(m.values()[i] == 0.0, mask[i]);
            }
        }

        #[test]
        fn score_is_monotone(
            base in proptest::collection::vec(0.0f64..5.0, 16),
            bump in proptest::collection::vec(0.0f64..5.0, 16),
        ) {
            let lo = map(4, 4, base.clone());
            let hi = map(4, 4, base.iter().zip(&bump).map(|(a, b)| a + b).collect());
            prop_assert!(picturable_score(&hi).unwrap() >= picturable_score(&lo).unwrap());
        }
    }
}
