//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DUALADCK"
//! 8       4     version (u32) = 1
//! 12      24    in_channels, in_height, in_width, out_channels, out_height, out_width (u32 each)
//! 36      1     size tag (0 = S, 1 = M)
//! 37      1     trained flag (0 / 1)
//! 38      1     teacher normalization present (0 / 1)
//! 39      1     reserved, 0
//! 40      8     optimizer steps completed (u64)
//! 48      4     parameter tensor count N (u32)
//! 52      ...   if present: out_channels f32 means, then out_channels f32 stds
//! ...     ...   N × { length L (u32), L × f32 }
//! ```
//!
//! Tensors appear in declared order: teacher, student, autoencoder; within a
//! network, for each convolution in layer order, its weight
//! (`[out][in][k][k]`) then its bias.

use std::fs;
use std::path::Path;

use super::{init_networks, Arch, BackboneBundle, ChannelNorm, SizeTag};
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DUALADCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl BackboneBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [
            a.in_channels,
            a.in_height,
            a.in_width,
            a.out_channels,
            a.out_height,
            a.out_width,
        ] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(match a.size_tag {
            SizeTag::S => 0,
            SizeTag::M => 1,
        });
        out.push(u8::from(self.trained));
        out.push(u8::from(self.teacher_norm.is_some()));
        out.push(0);
        out.extend_from_slice(&self.steps_completed.to_le_bytes());
        let tensors = self.parameter_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        if let Some(norm) = &self.teacher_norm {
            for v in norm.mean.iter().chain(&norm.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for t in tensors {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let size_tag = match r.u8()? {
            0 => SizeTag::S,
            1 => SizeTag::M,
            t => return Err(Error::Format(format!("unknown size tag byte {t}"))),
        };
        let trained = r.u8()? != 0;
        let has_norm = r.u8()? != 0;
        r.u8()?;
        let steps_completed = r.u64()?;
        let count = r.u32()? as usize;
        let arch = Arch {
            in_channels: dims[0],
            in_height: dims[1],
            in_width: dims[2],
            out_channels: dims[3],
            out_height: dims[4],
            out_width: dims[5],
            size_tag,
        };
        let mut bundle = init_networks(arch, 0)
            .map_err(|e| Error::Format(format!("checkpoint architecture is invalid: {e}")))?;
        if has_norm {
            let c = arch.out_channels;
            let mean = r.f32_vec(c)?;
            let std = r.f32_vec(c)?;
            bundle.teacher_norm = Some(ChannelNorm { mean, std });
        }
        let expected = bundle.parameter_tensors().len();
        if count != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, architecture needs {expected}"
            )));
        }
        let mut slots = bundle.teacher.params_mut();
        slots.extend(bundle.student.params_mut());
        slots.extend(bundle.autoencoder.params_mut());
        for (i, slot) in slots.into_iter().enumerate() {
            let len = r.u32()? as usize;
            if len != slot.len() {
                return Err(Error::Format(format!(
                    "tensor {i} has {len} values, architecture needs {}",
                    slot.len()
                )));
            }
            *slot = r.f32_vec(len)?;
        }
        r.finish()?;
        bundle.trained = trained;
        bundle.steps_completed = steps_completed;
        Ok(bundle)
    }
}

pub fn write_checkpoint(bundle: &BackboneBundle, path: &Path) -> Result<()> {
    fs::write(path, bundle.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BackboneBundle> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read checkpoint {}: {e}", path.display())))?;
    BackboneBundle::from_bytes(&bytes)
}
