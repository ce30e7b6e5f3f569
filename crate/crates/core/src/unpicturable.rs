//! Global-average-pooled features and the Gaussian/Mahalanobis scorer.
//!
//! Each image is reduced to one `C_out` vector by averaging a backbone output
//! over all locations. A Gaussian is fitted to the vectors of normal training
//! images and an image's score is its Mahalanobis distance to that Gaussian.
//!
//! Gaussian file layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DUALADGS"
//! 8       4     version (u32) = 1
//! 12      ...   Gaussian block
//! ```
//!
//! Gaussian block, also embedded in the statistics file:
//!
//! ```text
//! 1       source (0 = teacher, 1 = student_former)
//! 8       epsilon (f64)
//! 8       sample count (u64)
//! 4       dimension C (u32)
//! 8·C     mean (f64)
//! 8·C·C   covariance without ridge (f64), row-major
//! ```
//!
//! The factor of `Σ + εI` is not stored; it is recomputed on load.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneBundle, RawOutputs, SizeTag};
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::io::{put_f64s, ByteReader};
use crate::linalg::Cholesky;
use crate::tensor::FeatureMap;

pub const GAUSSIAN_MAGIC: &[u8; 8] = b"DUALADGS";
pub const GAUSSIAN_VERSION: u32 = 1;

/// Backbone output that is pooled into the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Teacher,
    #[default]
    StudentFormer,
}

impl FeatureSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSource::Teacher => "teacher",
            FeatureSource::StudentFormer => "student_former",
        }
    }

    /// The map this source selects from one forward pass.
    pub fn select(self, outputs: &RawOutputs) -> &FeatureMap {
        match self {
            FeatureSource::Teacher => &outputs.teacher_map,
            FeatureSource::StudentFormer => &outputs.student_former,
        }
    }

    fn tag(self) -> u8 {
        match self {
            FeatureSource::Teacher => 0,
            FeatureSource::StudentFormer => 1,
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(FeatureSource::Teacher),
            "student_former" => Ok(FeatureSource::StudentFormer),
            "student_latter" | "autoencoder" => Err(Error::Config(format!(
                "feature source {s:?} is not supported: it is trained to reproduce \
                 the autoencoder, which cannot represent the global arrangement"
            ))),
            other => Err(Error::Config(format!(
                "unknown feature source {other:?} (expected teacher or student_former)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSourceConfig {
    pub source: FeatureSource,
    pub size_tag: SizeTag,
}

/// Pooled feature vector, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "feature vector has non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-channel spatial mean, accumulated in `f64`.
pub fn gap(map: &FeatureMap) -> Result<FeatureVector> {
    let n = map.plane_len();
    if n == 0 {
        return Err(Error::Input(
            "cannot pool a map with empty spatial extent".into(),
        ));
    }
    let values = (0..map.channels())
        .map(|c| map.channel(c).iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64)
        .collect();
    FeatureVector::new(values)
}

/// How the ridge added to the covariance diagonal is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    Fixed(f64),
    /// `factor · trace(Σ) / C`.
    TraceScaled(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::TraceScaled(1e-3)
    }
}

impl Ridge {
    fn resolve(self, covariance: &[f64], dim: usize) -> Result<f64> {
        let (v, what) = match self {
            Ridge::Fixed(e) => (e, "epsilon"),
            Ridge::TraceScaled(f) => (f, "ridge factor"),
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!(
                "{what} must be finite and >= 0, got {v}"
            )));
        }
        Ok(match self {
            Ridge::Fixed(e) => e,
            Ridge::TraceScaled(f) => {
                let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
                f * trace / dim as f64
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    source: FeatureSource,
    mean: Vec<f64>,
    covariance: Vec<f64>,
    epsilon: f64,
    sample_count: u64,
    factor: Cholesky,
}

/// Two-pass sample mean and covariance (divisor `n − 1`).
fn mean_and_covariance(vectors: &[FeatureVector]) -> (Vec<f64>, Vec<f64>) {
    let dim = vectors[0].len();
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.as_slice()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = vec![0.0; dim * dim];
    let mut d = vec![0.0; dim];
    for v in vectors {
        for ((di, x), m) in d.iter_mut().zip(v.as_slice()).zip(&mean) {
            *di = x - m;
        }
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] += d[i] * d[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let c = cov[i * dim + j] / (n - 1.0);
            cov[i * dim + j] = c;
            cov[j * dim + i] = c;
        }
    }
    (mean, cov)
}

/// Fits mean and covariance to `vectors` and factorizes `Σ + εI`.
pub fn fit_gaussian(
    vectors: &[FeatureVector],
    ridge: Ridge,
    source: FeatureSource,
) -> Result<GaussianModel> {
    if vectors.len() < 2 {
        return Err(Error::Input(format!(
            "a Gaussian fit needs at least 2 feature vectors, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Input(
            "feature vectors must be non-empty and of equal length".into(),
        ));
    }
    let (mean, covariance) = mean_and_covariance(vectors);
    let epsilon = ridge.resolve(&covariance, dim)?;
    GaussianModel::from_parts(source, mean, covariance, epsilon, vectors.len() as u64)
}

impl GaussianModel {
    /// Builds a model from stored statistics, factorizing `Σ + εI`.
    pub fn from_parts(
        source: FeatureSource,
        mean: Vec<f64>,
        covariance: Vec<f64>,
        epsilon: f64,
        sample_count: u64,
    ) -> Result<Self> {
        let dim = mean.len();
        if covariance.len() != dim * dim {
            return Err(Error::Input(format!(
                "covariance has {} entries, mean has dimension {dim}",
                covariance.len()
            )));
        }
        if sample_count < 2 {
            return Err(Error::Input(format!(
                "sample count {sample_count} is below 2"
            )));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        if mean.iter().chain(&covariance).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "Gaussian statistics contain non-finite values".into(),
            ));
        }
        let scale = covariance.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (covariance[i * dim + j], covariance[j * dim + i]);
                if (a - b).abs() > 1e-12 * scale {
                    return Err(Error::Input(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let mut regularized = covariance.clone();
        for i in 0..dim {
            regularized[i * dim + i] += epsilon;
        }
        let factor = Cholesky::factor(&regularized, dim).map_err(|e| {
            Error::Numeric(format!(
                "covariance + {epsilon:e}·I cannot be factorized ({e}); use a larger epsilon"
            ))
        })?;
        Ok(Self {
            source,
            mean,
            covariance,
            epsilon,
            sample_count,
            factor,
        })
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sample covariance, without the ridge.
    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Lower factor of `Σ + εI`.
    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    /// `sqrt((v − μ)ᵀ (Σ + εI)⁻¹ (v − μ))` via a forward solve against the factor.
    pub fn mahalanobis(&self, v: &FeatureVector) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::Input(format!(
                "feature vector has length {}, model has dimension {}",
                v.len(),
                self.dim()
            )));
        }
        let d: Vec<f64> = v
            .as_slice()
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| x - m)
            .collect();
        let q = self.factor.inverse_quadratic_form(&d);
        if !q.is_finite() {
            return Err(Error::Numeric("Mahalanobis distance is not finite".into()));
        }
        Ok(q.sqrt())
    }

    pub(crate) fn write_block(&self, out: &mut Vec<u8>) {
        out.push(self.source.tag());
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out.extend_from_slice(&self.sample_count.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        put_f64s(out, &self.mean);
        put_f64s(out, &self.covariance);
    }

    pub(crate) fn read_block(r: &mut ByteReader<'_>) -> Result<Self> {
        let source = match r.u8()? {
            0 => FeatureSource::Teacher,
            1 => FeatureSource::StudentFormer,
            t => return Err(Error::Format(format!("unknown feature source tag {t}"))),
        };
        let epsilon = r.f64()?;
        let sample_count = r.u64()?;
        let dim = r.u32()? as usize;
        let mean = r.f64_vec(dim)?;
        let covariance = r.f64_vec(dim * dim)?;
        Self::from_parts(source, mean, covariance, epsilon, sample_count)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GAUSSIAN_MAGIC);
        out.extend_from_slice(&GAUSSIAN_VERSION.to_le_bytes());
        self.write_block(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "Gaussian file");
        if r.take(8)? != GAUSSIAN_MAGIC {
            return Err(Error::Format(
                "not a Gaussian statistics file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != GAUSSIAN_VERSION {
            return Err(Error::Format(format!(
                "unsupported Gaussian file version {version}"
            )));
        }
        let model = Self::read_block(&mut r)?;
        r.finish()?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn check_source(
    bundle: &BackboneBundle,
    model: &GaussianModel,
    cfg: &FeatureSourceConfig,
) -> Result<()> {
    if model.source != cfg.source {
        return Err(Error::Config(format!(
            "Gaussian was fitted on {} features but {} was requested",
            model.source, cfg.source
        )));
    }
    if bundle.arch().size_tag != cfg.size_tag {
        return Err(Error::Config(format!(
            "backbone size {} does not match configured size {}",
            bundle.arch().size_tag,
            cfg.size_tag
        )));
    }
    Ok(())
}

/// Score from an already computed forward pass.
pub fn score_outputs(model: &GaussianModel, outputs: &RawOutputs) -> Result<f64> {
    model.mahalanobis(&gap(model.source.select(outputs))?)
}

/// Forward pass, pooling of the configured map, Mahalanobis distance.
pub fn unpicturable_score(
    bundle: &BackboneBundle,
    model: &GaussianModel,
    image: &Image,
    cfg: &FeatureSourceConfig,
) -> Result<f64> {
    check_source(bundle, model, cfg)?;
    if !bundle.is_trained() {
        return Err(Error::State("backbone has not been trained".into()));
    }
    score_outputs(model, &bundle.forward(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_networks, Arch};

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn model(mean: &[f64], cov: &[f64]) -> GaussianModel {
        GaussianModel::from_parts(
            FeatureSource::StudentFormer,
            mean.to_vec(),
            cov.to_vec(),
            0.0,
            10,
        )
        .unwrap()
    }

    #[test]
    fn gap_examples() {
        let m = FeatureMap::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gap(&m).unwrap().as_slice(), &[2.5]);
        let m = FeatureMap::from_vec(
            3,
            2,
            3,
            (0..18).map(|i| (i / 6) as f32 * 1.5 - 1.0).collect(),
        )
        .unwrap();
        assert_eq!(gap(&m).unwrap().as_slice(), &[-1.0, 0.5, 2.0]);
        let empty = FeatureMap::zeros(2, 0, 3);
        assert!(matches!(gap(&empty), Err(Error::Input(_))));
    }

    #[test]
    fn mahalanobis_closed_forms() {
        let m = model(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!((m.mahalanobis(&fv(&[3.0, 4.0])).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(m.mahalanobis(&fv(&[0.0, 0.0])).unwrap(), 0.0);
        let m = model(&[1.0, 2.0], &[4.0, 0.0, 0.0, 9.0]);
        assert!((m.mahalanobis(&fv(&[3.0, 5.0])).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(m.mahalanobis(&fv(&[1.0])), Err(Error::Input(_))));
    }

    #[test]
    fn zero_variance_with_ridge() {
        let v = fv(&[1.0, -2.0, 0.5]);
        let m = fit_gaussian(
            &vec![v.clone(); 5],
            Ridge::Fixed(0.25),
            FeatureSource::Teacher,
        )
        .unwrap();
        assert_eq!(m.mean(), v.as_slice());
        assert!(m.covariance().iter().all(|&c| c == 0.0));
        let l = m.factor().lower();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l[i * 3 + j], if i == j { 0.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn singular_without_ridge() {
        let vs: Vec<_> = (0..3)
            .map(|i| fv(&[i as f64, 1.0 - i as f64, 2.0, 0.5 * i as f64]))
            .collect();
        let err = fit_gaussian(&vs, Ridge::Fixed(0.0), FeatureSource::StudentFormer).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("larger epsilon")));
        assert!(fit_gaussian(&vs, Ridge::default(), FeatureSource::StudentFormer).is_ok());
    }

    #[test]
    fn too_few_vectors_or_bad_epsilon() {
        assert!(matches!(
            fit_gaussian(&[fv(&[1.0])], Ridge::default(), FeatureSource::Teacher),
            Err(Error::Input(_))
        ));
        let vs = vec![fv(&[1.0]), fv(&[2.0])];
        assert!(fit_gaussian(&vs, Ridge::Fixed(-1.0), FeatureSource::Teacher).is_err());
        assert!(fit_gaussian(
            &[fv(&[1.0]), fv(&[1.0, 2.0])],
            Ridge::default(),
            FeatureSource::Teacher
        )
        .is_err());
    }

    #[test]
    fn trace_scaled_ridge() {
        let vs = vec![fv(&[0.0, 0.0]), fv(&[2.0, 0.0]), fv(&[0.0, 4.0])];
        let m = fit_gaussian(&vs, Ridge::TraceScaled(1e-3), FeatureSource::Teacher).unwrap();
        let trace = m.covariance()[0] + m.covariance()[3];
        assert!((m.epsilon() - 1e-3 * trace / 2.0).abs() < 1e-15);
    }

    #[test]
    fn source_parsing() {
        assert_eq!(
            "teacher".parse::<FeatureSource>().unwrap(),
            FeatureSource::Teacher
        );
        assert_eq!(
            "student_former".parse::<FeatureSource>().unwrap(),
            FeatureSource::StudentFormer
        );
        for bad in ["autoencoder", "student_latter", "x"] {
            assert!(matches!(
                bad.parse::<FeatureSource>(),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn file_round_trip() {
        let vs: Vec<_> = (0..6)
            .map(|i| fv(&[i as f64, (i * i) as f64 * 0.1, 1.0 / (1.0 + i as f64)]))
            .collect();
        let m = fit_gaussian(&vs, Ridge::default(), FeatureSource::Teacher).unwrap();
        let back = GaussianModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let bytes = m.to_bytes();
        assert!(GaussianModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn source_mismatch_is_config_error() {
        let mut bundle = init_networks(Arch::for_input(16, 16, 1, SizeTag::S), 0).unwrap();
        bundle.trained = true;
        let c = bundle.arch().out_channels;
        let m = GaussianModel::from_parts(
            FeatureSource::StudentFormer,
            vec![0.0; c],
            (0..c * c)
                .map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 })
                .collect(),
            0.0,
            2,
        )
        .unwrap();
        let img = Image::new(16, 16, 1, vec![0.5; 256]).unwrap();
        let teacher = FeatureSourceConfig {
            source: FeatureSource::Teacher,
            size_tag: SizeTag::S,
        };
        assert!(matches!(
            unpicturable_score(&bundle, &m, &img, &teacher),
            Err(Error::Config(_))
        ));
        let ok = FeatureSourceConfig::default();
        assert!(unpicturable_score(&bundle, &m, &img, &ok).unwrap() >= 0.0);
    }
}
