//! One file holding every calibrated statistic plus its provenance.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DUALADST"
//! 8       4     version (u32) = 1
//! 12      32    SHA-256 of the checkpoint file the statistics belong to
//! 44      32    SHA-256 of the canonical pipeline config
//! 76      8     seed (u64)
//! 84      8     training images used for the Gaussian (u64)
//! 92      8     validation images used for both normalizers (u64)
//! 100     1     size tag (0 = S, 1 = M)
//! 101     ...   Gaussian block (see the unpicturable module)
//! ...     16    map quantile levels q_low, q_high (f64)
//! ...     32    local map (low, high), global map (low, high) quantile values (f64)
//! ...     32    picturable mean, std, unpicturable mean, std (f64)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneBundle, SizeTag};
use crate::detector::{CalibrationCounts, Detector};
use crate::error::{Error, Result};
use crate::fusion::{Moments, ScoreNormalizer};
use crate::io::{put_f64s, ByteReader};
use crate::picturable::{MapNormalizer, QuantileLevels, QuantilePair};
use crate::unpicturable::{FeatureSourceConfig, GaussianModel};

pub const STATS_MAGIC: &[u8; 8] = b"DUALADST";
pub const STATS_VERSION: u32 = 1;

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub checkpoint_sha256: [u8; 32],
    pub config_sha256: [u8; 32],
    pub seed: u64,
    pub train_count: u64,
    pub validation_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Statistics {
    pub provenance: Provenance,
    pub size_tag: SizeTag,
    pub gaussian: GaussianModel,
    pub map_normalizer: MapNormalizer,
    pub score_normalizer: ScoreNormalizer,
}

impl Statistics {
    /// Extracts the calibrated parts of `detector`.
    pub fn from_detector(
        detector: &Detector,
        checkpoint_sha256: [u8; 32],
        config_sha256: [u8; 32],
        seed: u64,
    ) -> Result<Self> {
        if !detector.map_normalizer.is_calibrated() {
            return Err(Error::State("map normalizer is not calibrated".into()));
        }
        Ok(Self {
            provenance: Provenance {
                checkpoint_sha256,
                config_sha256,
                seed,
                train_count: detector.counts.train,
                validation_count: detector.counts.validation,
            },
            size_tag: detector.feature.size_tag,
            gaussian: detector.gaussian.clone(),
            map_normalizer: detector.map_normalizer.clone(),
            score_normalizer: detector.score_normalizer,
        })
    }

    /// Pairs the statistics with a backbone. The checkpoint bytes must hash to
    /// the recorded value unless `allow_mismatch` is set.
    pub fn into_detector(
        self,
        bundle: BackboneBundle,
        checkpoint_bytes: &[u8],
        allow_mismatch: bool,
    ) -> Result<Detector> {
        let actual = sha256(checkpoint_bytes);
        if actual != self.provenance.checkpoint_sha256 && !allow_mismatch {
            return Err(Error::Refused(format!(
                "statistics were calibrated for checkpoint {} but this checkpoint is {}; \
                 recalibrate or pass --allow-mismatch",
                hex::encode(self.provenance.checkpoint_sha256),
                hex::encode(actual)
            )));
        }
        if bundle.arch().size_tag != self.size_tag {
            return Err(Error::Config(format!(
                "statistics are for size {} but the checkpoint is size {}",
                self.size_tag,
                bundle.arch().size_tag
            )));
        }
        if bundle.arch().out_channels != self.gaussian.dim() {
            return Err(Error::Input(format!(
                "Gaussian has dimension {} but the backbone outputs {} channels",
                self.gaussian.dim(),
                bundle.arch().out_channels
            )));
        }
        Ok(Detector {
            bundle,
            feature: FeatureSourceConfig {
                source: self.gaussian.source(),
                size_tag: self.size_tag,
            },
            gaussian: self.gaussian,
            map_normalizer: self.map_normalizer,
            score_normalizer: self.score_normalizer,
            counts: CalibrationCounts {
                train: self.provenance.train_count,
                validation: self.provenance.validation_count,
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.provenance;
        let mut out = Vec::new();
        out.extend_from_slice(STATS_MAGIC);
        out.extend_from_slice(&STATS_VERSION.to_le_bytes());
        out.extend_from_slice(&p.checkpoint_sha256);
        out.extend_from_slice(&p.config_sha256);
        out.extend_from_slice(&p.seed.to_le_bytes());
        out.extend_from_slice(&p.train_count.to_le_bytes());
        out.extend_from_slice(&p.validation_count.to_le_bytes());
        out.push(match self.size_tag {
            SizeTag::S => 0,
            SizeTag::M => 1,
        });
        self.gaussian.write_block(&mut out);
        let levels = self.map_normalizer.levels();
        let local = self.map_normalizer.local().expect("calibrated");
        let global = self.map_normalizer.global().expect("calibrated");
        let sn = &self.score_normalizer;
        put_f64s(
            &mut out,
            &[
                levels.low,
                levels.high,
                local.low,
                local.high,
                global.low,
                global.high,
                sn.picturable.mean,
                sn.picturable.std,
                sn.unpicturable.mean,
                sn.unpicturable.std,
            ],
        );
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "statistics file");
        if r.take(8)? != STATS_MAGIC {
            return Err(Error::Format("not a statistics file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != STATS_VERSION {
            return Err(Error::Format(format!(
                "unsupported statistics version {version}"
            )));
        }
        let hash =
            |r: &mut ByteReader<'_>| -> Result<[u8; 32]> { Ok(r.take(32)?.try_into().unwrap()) };
        let provenance = Provenance {
            checkpoint_sha256: hash(&mut r)?,
            config_sha256: hash(&mut r)?,
            seed: r.u64()?,
            train_count: r.u64()?,
            validation_count: r.u64()?,
        };
        let size_tag = match r.u8()? {
            0 => SizeTag::S,
            1 => SizeTag::M,
            t => return Err(Error::Format(format!("unknown size tag byte {t}"))),
        };
        let gaussian = GaussianModel::read_block(&mut r)?;
        let v = r.f64_vec(10)?;
        r.finish()?;
        let map_normalizer = MapNormalizer::from_parts(
            QuantileLevels {
                low: v[0],
                high: v[1],
            },
            QuantilePair {
                low: v[2],
                high: v[3],
            },
            QuantilePair {
                low: v[4],
                high: v[5],
            },
        )?;
        let moments = |mean: f64, std: f64| -> Result<Moments> {
            if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
                return Err(Error::Format(format!(
                    "invalid score moments ({mean}, {std})"
                )));
            }
            Ok(Moments { mean, std })
        };
        Ok(Self {
            provenance,
            size_tag,
            gaussian,
            map_normalizer,
            score_normalizer: ScoreNormalizer {
                picturable: moments(v[6], v[7])?,
                unpicturable: moments(v[8], v[9])?,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Input(format!("cannot read statistics {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
