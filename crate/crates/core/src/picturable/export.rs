//! Writing anomaly maps to disk.
//!
//! Raw map layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DUALADMP"
//! 8       4     version (u32) = 1
//! 12      4     height (u32)
//! 16      4     width (u32)
//! 20      4·H·W values (f32), row-major
//! ```

use std::fs;
use std::path::Path;

use image::{imageops, ImageBuffer, Rgb};

use super::AnomalyMap;
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const RAW_MAP_MAGIC: &[u8; 8] = b"DUALADMP";
pub const RAW_MAP_VERSION: u32 = 1;

pub fn write_raw_map(map: &AnomalyMap, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 4 * map.values().len());
    out.extend_from_slice(RAW_MAP_MAGIC);
    out.extend_from_slice(&RAW_MAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &v in map.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_raw_map(path: &Path) -> Result<AnomalyMap> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read map {}: {e}", path.display())))?;
    let mut r = ByteReader::new(&bytes, "anomaly map");
    if r.take(8)? != RAW_MAP_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a raw anomaly map",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != RAW_MAP_VERSION {
        return Err(Error::Format(format!("unsupported map version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let values = r.f32_vec(h * w)?.into_iter().map(f64::from).collect();
    r.finish()?;
    AnomalyMap::new(h, w, values)
}

fn colormap(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let ch = |centre: f64| ((1.5 - (4.0 * t - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0), ch(2.0), ch(1.0)])
}

/// Colour-coded PNG of the map, upscaled to `size` with nearest-neighbour
/// sampling. Values are divided by `vmax` (the map maximum when `None`).
pub fn write_heatmap_png(
    map: &AnomalyMap,
    path: &Path,
    vmax: Option<f64>,
    size: Option<(u32, u32)>,
) -> Result<()> {
    if map.is_empty() {
        return Err(Error::Input("cannot render an empty anomaly map".into()));
    }
    let top = vmax.unwrap_or_else(|| map.values().iter().copied().fold(0.0, f64::max));
    let scale = if top > 0.0 { 1.0 / top } else { 0.0 };
    let img = ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        colormap(map.get(y as usize, x as usize) * scale)
    });
    let img = match size {
        Some((w, h)) if (w, h) != img.dimensions() => {
            imageops::resize(&img, w, h, imageops::FilterType::Nearest)
        }
        _ => img,
    };
    img.save(path).map_err(|e| {
        Error::Io(std::io::Error::other(format!(
            "cannot write {}: {e}",
            path.display()
        )))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = AnomalyMap::new(2, 3, vec![0.0, 0.5, 1.0, 1.5, 2.0, 0.25]).unwrap();
        write_raw_map(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(&bytes[..8], RAW_MAP_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        // row 1, column 0 is the fourth value
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 1.5);
        assert_eq!(read_raw_map(&p).unwrap(), m);
    }

    #[test]
    fn heatmap_png_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let m = AnomalyMap::new(4, 4, (0..16).map(f64::from).collect()).unwrap();
        write_heatmap_png(&m, &p, None, Some((64, 64))).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (64, 64));
        assert_eq!(*img.get_pixel(0, 0), colormap(0.0));
        assert_eq!(*img.get_pixel(63, 63), colormap(1.0));
    }
}
