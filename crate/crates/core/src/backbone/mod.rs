//! Teacher, double-width student, and autoencoder networks.
//!
//! All three map an `H_in × W_in × C_in` image to feature maps at a quarter of
//! the input resolution. The student emits `2·C_out` channels; its first
//! `C_out` channels (the former half) regress the teacher, the rest (the latter
//! half) regress the autoencoder. The teacher is a fixed, randomly initialized
//! patch-description network whose outputs are standardized per channel over
//! the training set.

mod checkpoint;
pub mod layers;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;
use layers::{Conv2d, Layer, Sequential};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, LossRecord, LossTrace, Optimizer, TeacherMode, TrainHParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SizeTag {
    #[default]
    S,
    M,
}

impl SizeTag {
    /// `(conv1, conv2)` widths of the teacher.
    fn patch_widths(self) -> (usize, usize) {
        match self {
            SizeTag::S => (16, 16),
            SizeTag::M => (32, 32),
        }
    }

    /// The student is twice as wide as the teacher; a student of the same
    /// width fits a random teacher far more slowly.
    fn student_widths(self) -> (usize, usize) {
        let (a, b) = self.patch_widths();
        (2 * a, 2 * b)
    }

    /// `(conv1, conv2, bottleneck)` widths of the autoencoder.
    fn ae_widths(self) -> (usize, usize, usize) {
        match self {
            SizeTag::S => (16, 16, 8),
            SizeTag::M => (32, 32, 16),
        }
    }

    pub fn default_out_channels(self) -> usize {
        match self {
            SizeTag::S => 8,
            SizeTag::M => 16,
        }
    }
}

impl fmt::Display for SizeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeTag::S => "S",
            SizeTag::M => "M",
        })
    }
}

impl FromStr for SizeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(SizeTag::S),
            "M" | "m" => Ok(SizeTag::M),
            other => Err(Error::Config(format!(
                "unknown size tag '{other}' (expected S or M)"
            ))),
        }
    }
}

/// Shape record shared by the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub size_tag: SizeTag,
}

impl Arch {
    /// Arch for a given input, default output width for the size tag.
    pub fn for_input(height: usize, width: usize, channels: usize, size_tag: SizeTag) -> Self {
        Self {
            in_channels: channels,
            in_height: height,
            in_width: width,
            out_channels: size_tag.default_out_channels(),
            out_height: height / 4,
            out_width: width / 4,
            size_tag,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("in_channels", self.in_channels),
            ("in_height", self.in_height),
            ("in_width", self.in_width),
            ("out_channels", self.out_channels),
            ("out_height", self.out_height),
            ("out_width", self.out_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!(
                    "architecture {name} must be positive"
                )));
            }
        }
        // Four stride-2 stages in the autoencoder encoder.
        if self.in_height % 16 != 0 || self.in_width % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be a multiple of 16",
                self.in_height, self.in_width
            )));
        }
        if self.out_height * 4 != self.in_height || self.out_width * 4 != self.in_width {
            return Err(Error::Config(format!(
                "output size {}x{} must be a quarter of the input size {}x{}",
                self.out_height, self.out_width, self.in_height, self.in_width
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.in_height, self.in_width, self.in_channels)
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        (self.out_channels, self.out_height, self.out_width)
    }
}

/// Strided patch network: two stride-2 4×4 convs then two 3×3 convs. The
/// receptive field is 26 pixels, so it only ever sees a local neighbourhood.
fn patch_network(
    in_ch: usize,
    out_ch: usize,
    (w1, w2): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Sequential {
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(in_ch, w1, 4, 2, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(w1, w2, 4, 2, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(w2, w2, 3, 1, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(w2, out_ch, 3, 1, 1, rng)),
    ])
}

/// Encoder down to `H_in/16`, decoder back up to `H_in/4`.
fn autoencoder(in_ch: usize, out_ch: usize, tag: SizeTag, rng: &mut ChaCha8Rng) -> Sequential {
    let (a1, a2, b) = tag.ae_widths();
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(in_ch, a1, 4, 2, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(a1, a2, 4, 2, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(a2, a2, 4, 2, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(a2, b, 4, 2, 1, rng)),
        Layer::Upsample2,
        Layer::Conv(Conv2d::new(b, a2, 3, 1, 1, rng)),
        Layer::Relu,
        Layer::Upsample2,
        Layer::Conv(Conv2d::new(a2, a2, 3, 1, 1, rng)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(a2, out_ch, 3, 1, 1, rng)),
    ])
}

/// Per-channel affine standardization of the raw teacher output.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelNorm {
    fn apply(&self, map: &mut FeatureMap) {
        let n = map.plane_len();
        for (c, plane) in map.as_mut_slice().chunks_mut(n).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneBundle {
    pub(crate) arch: Arch,
    pub(crate) teacher: Sequential,
    pub(crate) student: Sequential,
    pub(crate) autoencoder: Sequential,
    pub(crate) teacher_norm: Option<ChannelNorm>,
    pub(crate) trained: bool,
    pub(crate) steps_completed: u64,
}

/// The four same-shape maps produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub teacher_map: FeatureMap,
    pub student_former: FeatureMap,
    pub student_latter: FeatureMap,
    pub ae_map: FeatureMap,
}

/// Subtracted from every pixel before the networks see an image.
pub const INPUT_CENTER: f32 = 0.5;

pub(crate) fn network_input(image: &Image) -> FeatureMap {
    let mut x = image.to_feature_map();
    x.as_mut_slice().iter_mut().for_each(|v| *v -= INPUT_CENTER);
    x
}

/// Deterministically initializes all three networks from `seed`.
pub fn init_networks(arch: Arch, seed: u64) -> Result<BackboneBundle> {
    arch.validate()?;
    let net_rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    };
    let c_out = arch.out_channels;
    Ok(BackboneBundle {
        arch,
        teacher: patch_network(
            arch.in_channels,
            c_out,
            arch.size_tag.patch_widths(),
            &mut net_rng(0),
        ),
        student: patch_network(
            arch.in_channels,
            2 * c_out,
            arch.size_tag.student_widths(),
            &mut net_rng(1),
        ),
        autoencoder: autoencoder(arch.in_channels, c_out, arch.size_tag, &mut net_rng(2)),
        teacher_norm: None,
        trained: false,
        steps_completed: 0,
    })
}

impl BackboneBundle {
    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn steps_completed(&self) -> u64 {
        self.steps_completed
    }

    pub fn teacher_norm(&self) -> Option<&ChannelNorm> {
        self.teacher_norm.as_ref()
    }

    pub fn teacher(&self) -> &Sequential {
        &self.teacher
    }

    pub fn student(&self) -> &Sequential {
        &self.student
    }

    pub fn autoencoder(&self) -> &Sequential {
        &self.autoencoder
    }

    /// Every parameter tensor in checkpoint order: teacher, student, autoencoder.
    pub fn parameter_tensors(&self) -> Vec<&[f32]> {
        let mut v = self.teacher.params();
        v.extend(self.student.params());
        v.extend(self.autoencoder.params());
        v
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.shape() != self.arch.input_shape() {
            let (h, w, c) = self.arch.input_shape();
            let (gh, gw, gc) = image.shape();
            return Err(Error::Input(format!(
                "image shape mismatch: expected {h}x{w}x{c}, got {gh}x{gw}x{gc}"
            )));
        }
        Ok(())
    }

    pub(crate) fn teacher_output(&self, x: &FeatureMap) -> FeatureMap {
        let mut t = self.teacher.forward(x);
        if let Some(norm) = &self.teacher_norm {
            norm.apply(&mut t);
        }
        t
    }

    /// Full student output, `2·C_out` channels.
    pub fn student_output(&self, image: &Image) -> Result<FeatureMap> {
        self.check_input(image)?;
        Ok(self.student.forward(&network_input(image)))
    }

    pub fn forward(&self, image: &Image) -> Result<RawOutputs> {
        self.check_input(image)?;
        let x = network_input(image);
        let c = self.arch.out_channels;
        let student = self.student.forward(&x);
        Ok(RawOutputs {
            teacher_map: self.teacher_output(&x),
            student_former: student.slice_channels(0, c),
            student_latter: student.slice_channels(c, 2 * c),
            ae_map: self.autoencoder.forward(&x),
        })
    }

    /// Forward for several images; equal to calling [`BackboneBundle::forward`]
    /// on each.
    pub fn forward_batch(&self, images: &[&Image]) -> Result<Vec<RawOutputs>> {
        images.iter().map(|img| self.forward(img)).collect()
    }
}
