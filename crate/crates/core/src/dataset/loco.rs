//! Reader and writer for the MVTec-LOCO directory layout.
//!
//! ```text
//! <category>/
//!   train/good/*.png
//!   validation/good/*.png
//!   test/good/*.png
//!   test/logical_anomalies/*.png
//!   test/structural_anomalies/*.png
//!   anomaly_families.txt          (optional)
//! ```
//!
//! `anomaly_families.txt` overrides the picturable / unpicturable tag. Keys are
//! either an anomaly directory name (`logical_anomalies`) or a sample id
//! (`test/logical_anomalies/003`); values are `picturable` or `unpicturable`.
//! Per-sample entries win over directory entries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat};

use super::{AnomalyFamily, DatasetBundle, Image, ImageSample, Label, Split};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const FAMILY_MAP_FILE: &str = "anomaly_families.txt";

const LAYOUT: [(Split, Label); 5] = [
    (Split::Train, Label::Normal),
    (Split::Validation, Label::Normal),
    (Split::Test, Label::Normal),
    (Split::Test, Label::Logical),
    (Split::Test, Label::Structural),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadOptions {
    /// Resize every image to `(height, width)` on load.
    pub resize: Option<(usize, usize)>,
    /// Force single-channel images.
    pub grayscale: bool,
}

/// Loads one category directory.
pub fn load_loco_layout(root: &Path, options: &LoadOptions) -> Result<DatasetBundle> {
    if !root.is_dir() {
        return Err(Error::Layout(root.to_path_buf()));
    }
    for (split, label) in LAYOUT {
        let dir = root.join(split.as_str()).join(label.dir_name());
        if !dir.is_dir() {
            return Err(Error::Layout(dir));
        }
    }
    let category = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "category".into());
    let families = read_family_map(root)?;

    let mut splits: BTreeMap<Split, Vec<ImageSample>> = BTreeMap::new();
    for (split, label) in LAYOUT {
        let dir = root.join(split.as_str()).join(label.dir_name());
        for path in sorted_pngs(&dir)? {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let id = format!("{split}/{}/{stem}", label.dir_name());
            let family = if label.is_anomalous() {
                families
                    .get(&id)
                    .or_else(|| families.get(label.dir_name()))
                    .copied()
                    .or(label.default_family())
            } else {
                None
            };
            splits.entry(split).or_default().push(ImageSample {
                pixels: read_image(&path, options)?,
                id,
                label,
                anomaly_family: family,
                split,
                category: category.clone(),
            });
        }
    }
    for split in Split::ALL {
        splits.entry(split).or_default();
    }
    DatasetBundle::new(category, splits, None)
}

fn read_family_map(root: &Path) -> Result<BTreeMap<String, AnomalyFamily>> {
    let path = root.join(FAMILY_MAP_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(&path)?;
    KeyValues::parse(&text)?
        .into_map()
        .into_iter()
        .map(|(k, v)| Ok((k, v.parse()?)))
        .collect()
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads one PNG, applying `options` the same way the layout loader does.
pub fn read_image(path: &Path, options: &LoadOptions) -> Result<Image> {
    let decode_err = |msg: String| Error::Decode {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|e| decode_err(e.to_string()))?;
    let mut img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| decode_err(e.to_string()))?;
    if let Some((h, w)) = options.resize {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = img.resize_exact(w as u32, h as u32, FilterType::Triangle);
        }
    }
    let gray = options.grayscale || !img.color().has_color();
    let (h, w) = (img.height() as usize, img.width() as usize);
    if gray {
        Image::from_u8(h, w, 1, img.to_luma8().as_raw())
    } else {
        Image::from_u8(h, w, 3, img.to_rgb8().as_raw())
    }
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.shape();
    let bytes = img.to_u8();
    let dynamic = match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, bytes).map(DynamicImage::ImageLuma8),
        3 => image::RgbImage::from_raw(w as u32, h as u32, bytes).map(DynamicImage::ImageRgb8),
        _ => None,
    }
    .ok_or_else(|| Error::Input(format!("cannot encode a {c}-channel image as PNG")))?;
    dynamic
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Writes `bundle` under `out_root/<category>/` and returns that category
/// directory. The tree loads back with [`load_loco_layout`].
pub fn export_loco_layout(bundle: &DatasetBundle, out_root: &Path) -> Result<PathBuf> {
    let root = out_root.join(bundle.category());
    for (split, label) in LAYOUT {
        fs::create_dir_all(root.join(split.as_str()).join(label.dir_name()))?;
    }
    for sample in bundle.samples() {
        let path = root.join(format!("{}.png", sample.id));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_png(&path, &sample.pixels)?;
    }
    // Only record families that differ from the directory default.
    let mut overrides = KeyValues::default();
    for s in bundle.split(Split::Test).unwrap_or(&[]) {
        if let Some(f) = s.anomaly_family.filter(|&f| Some(f) != s.label.default_family()) {
            overrides.insert(s.id.clone(), f.as_str());
        }
    }
    let family_path = root.join(FAMILY_MAP_FILE);
    if !overrides.is_empty() {
        fs::write(&family_path, overrides.render())?;
    } else if family_path.exists() {
        fs::remove_file(&family_path)?;
    }
    if let Some(cfg) = bundle.generator_config() {
        fs::write(root.join("synth_config.txt"), cfg.render())?;
    }
    Ok(root)
}
