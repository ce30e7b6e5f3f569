//! Image samples, dataset bundles, and the sources that produce them.
//!
//! A bundle holds the train / validation / test splits of one category. Train
//! and validation only ever contain normal images; the test split mixes normal
//! images with structural and logical anomalies, each anomaly also carrying a
//! picturable / unpicturable family tag.

mod batch;
mod loco;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub use batch::BatchIter;
pub use loco::{export_loco_layout, load_loco_layout, read_image, LoadOptions, FAMILY_MAP_FILE};
pub use synth::{generate_synthetic, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Structural,
    Logical,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self != Label::Normal
    }

    /// Directory name used by the LOCO layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Normal => "good",
            Label::Structural => "structural_anomalies",
            Label::Logical => "logical_anomalies",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Structural => "structural",
            Label::Logical => "logical",
        }
    }

    /// Family assumed for an anomaly of this label when nothing overrides it.
    pub fn default_family(self) -> Option<AnomalyFamily> {
        match self {
            Label::Normal => None,
            Label::Structural => Some(AnomalyFamily::Picturable),
            Label::Logical => Some(AnomalyFamily::Unpicturable),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyFamily {
    /// Has a spatial locus that an anomaly map can show.
    Picturable,
    /// No unique location, e.g. a wrong object count.
    Unpicturable,
}

impl AnomalyFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyFamily::Picturable => "picturable",
            AnomalyFamily::Unpicturable => "unpicturable",
        }
    }
}

impl fmt::Display for AnomalyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "picturable" => Ok(AnomalyFamily::Picturable),
            "unpicturable" => Ok(AnomalyFamily::Unpicturable),
            other => Err(Error::Config(format!(
                "unknown anomaly family '{other}' (expected picturable or unpicturable)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Lookup(format!("unknown split '{other}'"))),
        }
    }
}

/// Height × width × channels image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Input(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "image of shape {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from 8-bit samples in interleaved (HWC) order.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(height, width, channels, data)
    }

    /// Quantizes back to 8 bits; exact for images built by [`Image::from_u8`].
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f32 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    /// Channel-major copy for feeding the networks.
    pub fn to_feature_map(&self) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, self.height, self.width);
        let plane = self.height * self.width;
        let dst = out.as_mut_slice();
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                dst[c * plane + i] = v;
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Path-like identifier, e.g. `test/logical_anomalies/003`.
    pub id: String,
    pub pixels: Image,
    pub label: Label,
    pub anomaly_family: Option<AnomalyFamily>,
    pub split: Split,
    pub category: String,
}

impl ImageSample {
    pub fn is_anomalous(&self) -> bool {
        self.label.is_anomalous()
    }
}

/// Immutable set of splits for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    category: String,
    splits: BTreeMap<Split, Vec<ImageSample>>,
    generator_config: Option<SynthConfig>,
}

impl DatasetBundle {
    /// Validates sample invariants and assembles a bundle.
    pub fn new(
        category: impl Into<String>,
        splits: BTreeMap<Split, Vec<ImageSample>>,
        generator_config: Option<SynthConfig>,
    ) -> Result<Self> {
        let category = category.into();
        let mut shape = None;
        for (&split, samples) in &splits {
            for s in samples {
                if s.split != split {
                    return Err(Error::Contract(format!(
                        "sample {} tagged {} stored in split {split}",
                        s.id, s.split
                    )));
                }
                if split != Split::Test && s.label.is_anomalous() {
                    return Err(Error::Contract(format!(
                        "{split} split may only contain normal images, {} is {}",
                        s.id, s.label
                    )));
                }
                if s.label.is_anomalous() != s.anomaly_family.is_some() {
                    return Err(Error::Contract(format!(
                        "sample {}: anomaly family must be present exactly for anomalous labels",
                        s.id
                    )));
                }
                if s.category != category {
                    return Err(Error::Contract(format!(
                        "sample {} belongs to category {}, bundle is {category}",
                        s.id, s.category
                    )));
                }
                match shape {
                    None => shape = Some(s.pixels.shape()),
                    Some(expected) if expected != s.pixels.shape() => {
                        return Err(Error::Input(format!(
                            "sample {} has shape {:?}, category shape is {:?}",
                            s.id,
                            s.pixels.shape(),
                            expected
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(Self {
            category,
            splits,
            generator_config,
        })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn generator_config(&self) -> Option<&SynthConfig> {
        self.generator_config.as_ref()
    }

    /// Samples of a split, or a lookup error if the split is absent.
    pub fn split(&self, split: Split) -> Result<&[ImageSample]> {
        self.splits
            .get(&split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("bundle has no {split} split")))
    }

    /// Like [`DatasetBundle::split`] but also rejects empty splits.
    pub fn nonempty_split(&self, split: Split) -> Result<&[ImageSample]> {
        let s = self.split(split)?;
        if s.is_empty() {
            return Err(Error::Input(format!("{split} split is empty")));
        }
        Ok(s)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.get(&split).map_or(0, Vec::len)
    }

    /// `(height, width, channels)` shared by every sample, if any exist.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.splits
            .values()
            .flat_map(|v| v.first())
            .map(|s| s.pixels.shape())
            .next()
    }

    pub fn samples(&self) -> impl Iterator<Item = &ImageSample> {
        self.splits.values().flatten()
    }
}
