//! Slice loading, preprocessing, dataset splits, and elastic augmentation.
//!
//! On-disk layout: `<root>/<volume_id>/img_<k>.png` + `lab_<k>.png` with `k`
//! zero-padded, or a packed `<root>/<volume_id>.vol` archive; a `dataset.toml`
//! at the root declares the taxonomy, an optional id-remap table, and the
//! crop mode. Images are 8- or 16-bit grayscale PNG and are min-max
//! normalized per slice on load; labels are integer PNG.

mod phantom;

pub use phantom::{class_intensity, synth_phantom, PhantomSpec, PHANTOM_SLICES};

use crate::archive::Archive;
use crate::error::{AtmError, Result};
use crate::taxonomy::ClassTaxonomy;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

/// One annotated sagittal slice. `image` is min-max normalized to [0,1];
/// `label` holds taxonomy ids.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub image: Array2<f64>,
    pub label: Array2<u8>,
    pub volume_id: String,
    pub slice_index: usize,
    pub slice_count: usize,
}

impl SliceSample {
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.image.dim() != self.label.dim() {
            return Err(AtmError::ShapeMismatch(format!(
                "image {:?} vs label {:?} in volume {}",
                self.image.dim(),
                self.label.dim(),
                self.volume_id
            )));
        }
        if self.slice_index >= self.slice_count {
            return Err(AtmError::InvalidArgument(format!(
                "slice_index {} >= slice_count {}",
                self.slice_index, self.slice_count
            )));
        }
        let max = taxonomy.num_classes() as u8;
        if let Some(bad) = self.label.iter().find(|&&v| v >= max) {
            return Err(AtmError::InvalidClass(*bad as u32));
        }
        Ok(())
    }

    /// Non-background class ids present in the label.
    pub fn present_ids(&self) -> BTreeSet<u32> {
        self.label.iter().filter(|&&v| v != 0).map(|&v| v as u32).collect()
    }
}

/// A volume is an ordered list of slices sharing a `volume_id`.
#[derive(Debug, Clone)]
pub struct Volume {
    pub volume_id: String,
    pub slices: Vec<SliceSample>,
}

impl Volume {
    pub fn present_ids(&self) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        for s in &self.slices {
            out.extend(s.present_ids());
        }
        out
    }
}

/// Volume-level train/val/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self, all: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.clone()) {
                return Err(AtmError::Config(format!("volume '{id}' assigned twice")));
            }
        }
        for id in all {
            if !seen.contains(id) {
                return Err(AtmError::Config(format!("volume '{id}' unassigned")));
            }
        }
        Ok(())
    }
}

/// Crop applied before the resize in [`preprocess`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    None,
    /// Bounding box of above-mean pixels, padded 5% per side.
    #[default]
    RegionMean,
}

/// Root-level dataset description (`dataset.toml`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub taxonomy: String,
    #[serde(default)]
    pub crop: CropMode,
    /// On-disk label value -> internal taxonomy id.
    #[serde(default)]
    pub remap: BTreeMap<String, u32>,
}

impl DatasetConfig {
    pub fn remap_table(&self) -> Result<Option<BTreeMap<u32, u32>>> {
        if self.remap.is_empty() {
            return Ok(None);
        }
        let mut out = BTreeMap::new();
        for (k, v) in &self.remap {
            let key: u32 = k
                .parse()
                .map_err(|_| AtmError::Config(format!("remap key '{k}' is not an integer")))?;
            out.insert(key, *v);
        }
        Ok(Some(out))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AtmError::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| AtmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| AtmError::Config(format!("serialize dataset config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

// ---- resampling ----

/// Bilinear resize with half-pixel centers; same-size inputs pass through
/// untouched.
pub fn resize_bilinear(img: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for i in 0..oh {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for j in 0..ow {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            out[[i, j]] = (1.0 - ty) * ((1.0 - tx) * img[[y0, x0]] + tx * img[[y0, x1]])
                + ty * ((1.0 - tx) * img[[y1, x0]] + tx * img[[y1, x1]]);
        }
    }
    out
}

/// Nearest-neighbor resize for integer label maps.
pub fn resize_nearest(lab: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = lab.dim();
    if (h, w) == (oh, ow) {
        return lab.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let y = (((i as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        let x = (((j as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
        lab[[y, x]]
    })
}

fn region_mean_bbox(img: &Array2<f64>) -> Option<(usize, usize, usize, usize)> {
    let mean = img.sum() / img.len() as f64;
    let (h, w) = img.dim();
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    let mut any = false;
    for ((y, x), &v) in img.indexed_iter() {
        if v > mean {
            any = true;
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    if !any {
        return None;
    }
    let pad_y = ((y1 - y0 + 1) as f64 * 0.05).ceil() as usize;
    let pad_x = ((x1 - x0 + 1) as f64 * 0.05).ceil() as usize;
    Some((
        y0.saturating_sub(pad_y),
        (y1 + pad_y).min(h - 1),
        x0.saturating_sub(pad_x),
        (x1 + pad_x).min(w - 1),
    ))
}

/// Crop (region-mean bounding box) and resize a slice to `target x target`.
///
/// The image is resampled bilinearly, the label with nearest-neighbor. The
/// crop only triggers on inputs that are not already target-sized, so
/// applying `preprocess` twice is exactly the identity on the second pass.
pub fn preprocess(sample: &SliceSample, target: usize, crop: CropMode) -> Result<SliceSample> {
    if target == 0 {
        return Err(AtmError::InvalidArgument("preprocess target must be positive".into()));
    }
    let (h, w) = sample.image.dim();
    if (h, w) == (target, target) {
        return Ok(sample.clone());
    }
    let (image, label) = match crop {
        CropMode::RegionMean => match region_mean_bbox(&sample.image) {
            Some((y0, y1, x0, x1)) => (
                sample.image.slice(ndarray::s![y0..=y1, x0..=x1]).to_owned(),
                sample.label.slice(ndarray::s![y0..=y1, x0..=x1]).to_owned(),
            ),
            None => (sample.image.clone(), sample.label.clone()),
        },
        CropMode::None => (sample.image.clone(), sample.label.clone()),
    };
    Ok(SliceSample {
        image: resize_bilinear(&image, target, target),
        label: resize_nearest(&label, target, target),
        volume_id: sample.volume_id.clone(),
        slice_index: sample.slice_index,
        slice_count: sample.slice_count,
    })
}

// ---- stratified split ----

/// Deterministic 8:1:1-style split by volume, stratified on the rarest class
/// present in each volume (ties broken by class id). Volumes within a bucket
/// are shuffled by the seed, then dealt to splits with a largest-remainder
/// credit scheme so global sizes stay within one volume of the exact ratios.
pub fn stratified_split(
    volumes: &[(String, BTreeSet<u32>)],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<DatasetSplit> {
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|&p| p == 0) {
        return Err(AtmError::InvalidArgument("split ratios must be positive".into()));
    }
    if volumes.len() < 3 {
        return Err(AtmError::InvalidArgument(format!(
            "need at least 3 volumes to split, got {}",
            volumes.len()
        )));
    }

    let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
    for (_, present) in volumes {
        for &c in present {
            *freq.entry(c).or_default() += 1;
        }
    }
    let rarest = |present: &BTreeSet<u32>| -> Option<u32> {
        present.iter().min_by_key(|&&c| (freq[&c], c)).copied()
    };

    let mut buckets: BTreeMap<Option<u32>, Vec<usize>> = BTreeMap::new();
    for (i, (_, present)) in volumes.iter().enumerate() {
        buckets.entry(rarest(present)).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = parts.iter().map(|&p| p as f64).sum();
    let frac: Vec<f64> = parts.iter().map(|&p| p as f64 / total).collect();
    let mut credit = [0.0f64; 3];
    let mut out: [Vec<String>; 3] = Default::default();
    for bucket in buckets.values_mut() {
        bucket.shuffle(&mut rng);
        for &vi in bucket.iter() {
            for s in 0..3 {
                credit[s] += frac[s];
            }
            let pick = (0..3)
                .max_by(|&a, &b| credit[a].partial_cmp(&credit[b]).unwrap())
                .unwrap();
            credit[pick] -= 1.0;
            out[pick].push(volumes[vi].0.clone());
        }
    }
    let [train, val, test] = out;
    Ok(DatasetSplit { train, val, test })
}

// ---- elastic distortion ----

/// Smooth random warp from a 4x4 control-point displacement grid, applied
/// identically to image (bilinear) and label (nearest). Maximum displacement
/// is `strength * 5%` of the image width; strength 0 is the identity.
pub fn random_distort(sample: &SliceSample, strength: f64, seed: u64) -> Result<SliceSample> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(AtmError::InvalidArgument(format!("strength {strength} outside [0,1]")));
    }
    let (h, w) = sample.image.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = strength * 0.05 * w as f64;
    const G: usize = 4;
    let mut grid_dy = [[0.0f64; G]; G];
    let mut grid_dx = [[0.0f64; G]; G];
    for gy in 0..G {
        for gx in 0..G {
            grid_dy[gy][gx] = rng.gen_range(-1.0..1.0) * amp;
            grid_dx[gy][gx] = rng.gen_range(-1.0..1.0) * amp;
        }
    }

    let interp = |grid: &[[f64; G]; G], y: usize, x: usize| -> f64 {
        let fy = if h > 1 { y as f64 / (h - 1) as f64 * (G - 1) as f64 } else { 0.0 };
        let fx = if w > 1 { x as f64 / (w - 1) as f64 * (G - 1) as f64 } else { 0.0 };
        let y0 = (fy.floor() as usize).min(G - 2);
        let x0 = (fx.floor() as usize).min(G - 2);
        let ty = fy - y0 as f64;
        let tx = fx - x0 as f64;
        (1.0 - ty) * ((1.0 - tx) * grid[y0][x0] + tx * grid[y0][x0 + 1])
            + ty * ((1.0 - tx) * grid[y0 + 1][x0] + tx * grid[y0 + 1][x0 + 1])
    };

    let mut image = Array2::<f64>::zeros((h, w));
    let mut label = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let sy = (y as f64 + interp(&grid_dy, y, x)).clamp(0.0, (h - 1) as f64);
            let sx = (x as f64 + interp(&grid_dx, y, x)).clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            image[[y, x]] = (1.0 - ty)
                * ((1.0 - tx) * sample.image[[y0, x0]] + tx * sample.image[[y0, x1]])
                + ty * ((1.0 - tx) * sample.image[[y1, x0]] + tx * sample.image[[y1, x1]]);
            let yn = (sy.round() as usize).min(h - 1);
            let xn = (sx.round() as usize).min(w - 1);
            label[[y, x]] = sample.label[[yn, xn]];
        }
    }
    Ok(SliceSample { image, label, ..sample.clone() })
}

// ---- on-disk volumes ----

fn normalize_min_max(img: &mut Array2<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        img.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        img.fill(0.0);
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> AtmError {
    AtmError::Load { path: path.display().to_string(), reason: reason.into() }
}

fn read_gray_image(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let buf = img.to_luma16();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut arr = Array2::<f64>::zeros((h, w));
    for (x, y, p) in buf.enumerate_pixels() {
        arr[[y as usize, x as usize]] = p.0[0] as f64;
    }
    normalize_min_max(&mut arr);
    Ok(arr)
}

fn read_label_image(path: &Path) -> Result<Array2<u32>> {
    let img = image::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let (w, h);
    let mut arr;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            (w, h) = (buf.width() as usize, buf.height() as usize);
            arr = Array2::<u32>::zeros((h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                arr[[y as usize, x as usize]] = p.0[0] as u32;
            }
        }
        image::DynamicImage::ImageLuma16(buf) => {
            (w, h) = (buf.width() as usize, buf.height() as usize);
            arr = Array2::<u32>::zeros((h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                arr[[y as usize, x as usize]] = p.0[0] as u32;
            }
        }
        _ => return Err(load_err(path, "label must be 8- or 16-bit grayscale PNG")),
    }
    Ok(arr)
}

fn remap_label(
    raw: Array2<u32>,
    remap: Option<&BTreeMap<u32, u32>>,
    taxonomy: &ClassTaxonomy,
    path: &Path,
) -> Result<Array2<u8>> {
    let max = taxonomy.num_classes() as u32;
    let mut out = Array2::<u8>::zeros(raw.dim());
    for (o, &v) in out.iter_mut().zip(raw.iter()) {
        let id = match remap {
            Some(table) => *table
                .get(&v)
                .ok_or_else(|| load_err(path, format!("label value {v} missing from remap table")))?,
            None => v,
        };
        if id >= max {
            return Err(load_err(
                path,
                format!("label value {id} out of range for {}-class taxonomy", max),
            ));
        }
        *o = id as u8;
    }
    Ok(out)
}

/// Load one volume from a directory of `img_<k>.png` / `lab_<k>.png` pairs.
pub fn load_volume(
    dir: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
    remap: Option<&BTreeMap<u32, u32>>,
) -> Result<Vec<SliceSample>> {
    let dir = dir.as_ref();
    let volume_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    let mut keys: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| load_err(dir, e.to_string()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(stem) = name.strip_prefix("img_").and_then(|s| s.strip_suffix(".png")) {
            let k: usize = stem
                .parse()
                .map_err(|_| load_err(&path, "slice index is not an integer"))?;
            keys.push((k, path.clone()));
        }
    }
    if keys.is_empty() {
        return Err(load_err(dir, "empty volume: no img_<k>.png slices found"));
    }
    keys.sort_by_key(|(k, _)| *k);

    let slice_count = keys.len();
    let mut slices = Vec::with_capacity(slice_count);
    for (slice_index, (k, img_path)) in keys.into_iter().enumerate() {
        let lab_path = img_path.with_file_name(
            img_path
                .file_name()
                .unwrap()
                .to_string_lossy()
                .replacen("img_", "lab_", 1),
        );
        if !lab_path.exists() {
            return Err(load_err(&lab_path, format!("missing label file for slice {k}")));
        }
        let image = read_gray_image(&img_path)?;
        let raw = read_label_image(&lab_path)?;
        if raw.dim() != image.dim() {
            return Err(load_err(
                &lab_path,
                format!("label shape {:?} differs from image {:?}", raw.dim(), image.dim()),
            ));
        }
        let label = remap_label(raw, remap, taxonomy, &lab_path)?;
        slices.push(SliceSample {
            image,
            label,
            volume_id: volume_id.clone(),
            slice_index,
            slice_count,
        });
    }
    Ok(slices)
}

/// Load one volume from a packed `.vol` archive.
pub fn load_volume_archive(
    path: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
    remap: Option<&BTreeMap<u32, u32>>,
) -> Result<Vec<SliceSample>> {
    let path = path.as_ref();
    let archive = Archive::read_file(path)?;
    let volume_id = archive.meta.get("volume_id").cloned().unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let mut indices: Vec<usize> = archive
        .names()
        .filter_map(|n| n.strip_prefix("img_").and_then(|s| s.parse().ok()))
        .collect();
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(load_err(path, "empty volume archive"));
    }
    let slice_count = indices.len();
    let mut slices = Vec::with_capacity(slice_count);
    for (slice_index, k) in indices.into_iter().enumerate() {
        let img = archive.get_f64(&format!("img_{k:03}"))?;
        let lab = archive.get_u8(&format!("lab_{k:03}"))?;
        let mut image = img
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| load_err(path, format!("img_{k:03} is not 2-d")))?;
        normalize_min_max(&mut image);
        let raw = lab
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| load_err(path, format!("lab_{k:03} is not 2-d")))?
            .mapv(|v| v as u32);
        if raw.dim() != image.dim() {
            return Err(load_err(path, format!("lab_{k:03} shape differs from image")));
        }
        let label = remap_label(raw, remap, taxonomy, path)?;
        slices.push(SliceSample {
            image,
            label,
            volume_id: volume_id.clone(),
            slice_index,
            slice_count,
        });
    }
    Ok(slices)
}

/// Write a volume as `img_<k>.png` / `lab_<k>.png` pairs (16-bit image PNG,
/// 8-bit label PNG).
pub fn save_volume_png(dir: impl AsRef<Path>, slices: &[SliceSample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for s in slices {
        let (h, w) = s.image.dim();
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let v = s.image[[y as usize, x as usize]].clamp(0.0, 1.0);
            p.0[0] = (v * 65535.0).round() as u16;
        }
        let mut lab = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
        for (x, y, p) in lab.enumerate_pixels_mut() {
            p.0[0] = s.label[[y as usize, x as usize]];
        }
        let ipath = dir.join(format!("img_{:03}.png", s.slice_index));
        let lpath = dir.join(format!("lab_{:03}.png", s.slice_index));
        img.save(&ipath).map_err(|e| load_err(&ipath, e.to_string()))?;
        lab.save(&lpath).map_err(|e| load_err(&lpath, e.to_string()))?;
    }
    Ok(())
}

/// Write a volume as a packed `.vol` archive.
pub fn save_volume_archive(path: impl AsRef<Path>, slices: &[SliceSample]) -> Result<()> {
    let mut archive = Archive::new();
    if let Some(first) = slices.first() {
        archive.meta.insert("volume_id".into(), first.volume_id.clone());
    }
    for s in slices {
        archive.insert_f64(format!("img_{:03}", s.slice_index), s.image.clone().into_dyn());
        let lab: ArrayD<u8> = s.label.clone().into_dyn();
        archive.insert_u8(format!("lab_{:03}", s.slice_index), lab);
    }
    archive.write_file(path)
}

/// Load label maps only (`lab_<k>.png` per volume subdirectory); used to
/// score prediction directories against ground-truth directories. Returns
/// `(volume_id, slice_key, label)` sorted by volume then slice.
pub fn load_label_maps(
    root: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<(String, usize, Array2<u8>)>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| load_err(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let volume_id = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut labs: Vec<(usize, PathBuf)> = std::fs::read_dir(&dir)
            .map_err(|e| load_err(&dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?;
                let k: usize =
                    name.strip_prefix("lab_")?.strip_suffix(".png")?.parse().ok()?;
                Some((k, p))
            })
            .collect();
        labs.sort_by_key(|(k, _)| *k);
        for (k, path) in labs {
            let raw = read_label_image(&path)?;
            let label = remap_label(raw, None, taxonomy, &path)?;
            out.push((volume_id.clone(), k, label));
        }
    }
    if out.is_empty() {
        return Err(load_err(root, "no lab_<k>.png files found"));
    }
    Ok(out)
}

/// Enumerate and load all volumes under a dataset root (subdirectories and
/// `.vol` archives).
pub fn load_dataset(
    root: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
    remap: Option<&BTreeMap<u32, u32>>,
) -> Result<Vec<Volume>> {
    let root = root.as_ref();
    let mut volumes = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| load_err(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            let slices = load_volume(&path, taxonomy, remap)?;
            let volume_id = slices[0].volume_id.clone();
            volumes.push(Volume { volume_id, slices });
        } else if path.extension().is_some_and(|e| e == "vol") {
            let slices = load_volume_archive(&path, taxonomy, remap)?;
            let volume_id = slices[0].volume_id.clone();
            volumes.push(Volume { volume_id, slices });
        }
    }
    if volumes.is_empty() {
        return Err(load_err(root, "no volumes found under dataset root"));
    }
    Ok(volumes)
}

/// Label map one-hot helper used by losses and tests: `(H*W, s_total)`.
pub fn one_hot(label: &Array2<u8>, num_classes: usize) -> ArrayD<f64> {
    let (h, w) = label.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[h * w, num_classes]));
    for (i, &v) in label.iter().enumerate() {
        out[[i, v as usize]] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{builtin_taxonomy, Dataset};

    fn phantom_volume(size: usize, n: usize, seed: u64) -> Vec<SliceSample> {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let spec = PhantomSpec {
            image_size: size,
            n_vertebrae: n,
            noise_sigma: 0.01,
            seed,
        };
        synth_phantom(&spec, &tax).unwrap()
    }

    #[test]
    fn preprocess_preserves_class_set_on_large_structures() {
        let slices = phantom_volume(512, 5, 3);
        let s = &slices[2];
        let out = preprocess(s, 384, CropMode::RegionMean).unwrap();
        assert_eq!(out.image.dim(), (384, 384));
        assert_eq!(out.present_ids(), s.present_ids());
    }

    #[test]
    fn preprocess_identity_on_target_sized_input() {
        let slices = phantom_volume(96, 4, 4);
        let s = &slices[0];
        let out = preprocess(s, 96, CropMode::RegionMean).unwrap();
        assert_eq!(out.label, s.label);
        let max_diff = out
            .image
            .iter()
            .zip(s.image.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn preprocess_all_background_stays_background() {
        let s = SliceSample {
            image: Array2::zeros((64, 48)),
            label: Array2::zeros((64, 48)),
            volume_id: "v".into(),
            slice_index: 0,
            slice_count: 1,
        };
        let out = preprocess(&s, 32, CropMode::RegionMean).unwrap();
        assert!(out.label.iter().all(|&v| v == 0));
    }

    #[test]
    fn preprocess_rejects_zero_target() {
        let slices = phantom_volume(64, 3, 5);
        assert!(preprocess(&slices[0], 0, CropMode::None).is_err());
    }

    #[test]
    fn preprocess_twice_is_idempotent_on_labels() {
        let slices = phantom_volume(128, 5, 6);
        let once = preprocess(&slices[1], 96, CropMode::RegionMean).unwrap();
        let twice = preprocess(&once, 96, CropMode::RegionMean).unwrap();
        assert_eq!(once.label, twice.label);
        assert_eq!(once.image, twice.image);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let classes: BTreeSet<u32> = [1u32, 2, 3].into_iter().collect();
        let volumes: Vec<(String, BTreeSet<u32>)> =
            (0..10).map(|i| (format!("v{i}"), classes.clone())).collect();
        let a = stratified_split(&volumes, (8, 1, 1), 0).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 1, 1));
        let b = stratified_split(&volumes, (8, 1, 1), 0).unwrap();
        assert_eq!(a, b);
        let all: Vec<String> = volumes.iter().map(|(v, _)| v.clone()).collect();
        a.validate(&all).unwrap();
    }

    #[test]
    fn split_rejects_tiny_sets() {
        let volumes: Vec<(String, BTreeSet<u32>)> =
            (0..2).map(|i| (format!("v{i}"), BTreeSet::new())).collect();
        assert!(stratified_split(&volumes, (8, 1, 1), 0).is_err());
    }

    #[test]
    fn split_keeps_rare_class_out_of_test_alone() {
        // 12 volumes, exactly two contain the rare class 9.
        let common: BTreeSet<u32> = [1u32, 2].into_iter().collect();
        let rare: BTreeSet<u32> = [1u32, 2, 9].into_iter().collect();
        for seed in 0..20 {
            let volumes: Vec<(String, BTreeSet<u32>)> = (0..12)
                .map(|i| {
                    let p = if i < 2 { rare.clone() } else { common.clone() };
                    (format!("v{i}"), p)
                })
                .collect();
            let split = stratified_split(&volumes, (8, 1, 1), seed).unwrap();
            let in_test =
                ["v0", "v1"].iter().filter(|v| split.test.contains(&v.to_string())).count();
            assert!(in_test < 2, "seed {seed}: both rare volumes in test");
        }
    }

    #[test]
    fn distort_strength_zero_is_identity() {
        let slices = phantom_volume(64, 4, 7);
        let s = &slices[0];
        let out = random_distort(s, 0.0, 42).unwrap();
        assert_eq!(out.label, s.label);
        let max_diff = out
            .image
            .iter()
            .zip(s.image.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn distort_deterministic_and_no_new_classes() {
        let slices = phantom_volume(64, 4, 8);
        let s = &slices[1];
        let a = random_distort(s, 0.5, 9).unwrap();
        let b = random_distort(s, 0.5, 9).unwrap();
        assert_eq!(a.label, b.label);
        assert_eq!(a.image, b.image);
        let before = s.present_ids();
        let after = a.present_ids();
        assert!(after.is_subset(&before));
    }

    #[test]
    fn png_volume_round_trip_and_errors() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("vol01");
        let slices = phantom_volume(48, 3, 10);
        // keep 12 slices by duplicating with new indices
        let mut twelve = Vec::new();
        for i in 0..12 {
            let mut s = slices[i % slices.len()].clone();
            s.slice_index = i;
            s.slice_count = 12;
            twelve.push(s);
        }
        save_volume_png(&vdir, &twelve).unwrap();
        let loaded = load_volume(&vdir, &tax, None).unwrap();
        assert_eq!(loaded.len(), 12);
        assert_eq!(loaded[0].slice_count, 12);
        assert_eq!(loaded[3].present_ids(), twelve[3].present_ids());

        // out-of-range label value
        let bad = tmp.path().join("vol02");
        std::fs::create_dir_all(&bad).unwrap();
        let mut s = twelve[0].clone();
        s.label[[0, 0]] = 25;
        s.slice_index = 0;
        save_volume_png(&bad, &[s]).unwrap();
        let err = load_volume(&bad, &tax, None).unwrap_err();
        assert!(err.to_string().contains("25"), "{err}");

        // empty volume
        let empty = tmp.path().join("vol03");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(load_volume(&empty, &tax, None).is_err());
    }

    #[test]
    fn archive_volume_round_trip() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("vol01.vol");
        let slices = phantom_volume(48, 3, 11);
        save_volume_archive(&path, &slices).unwrap();
        let loaded = load_volume_archive(&path, &tax, None).unwrap();
        assert_eq!(loaded.len(), slices.len());
        for (a, b) in loaded.iter().zip(&slices) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.volume_id, b.volume_id);
        }
    }

    #[test]
    fn remap_table_applies() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("volr");
        let mut slices = phantom_volume(48, 3, 12);
        // shift all labels by +100 on disk
        for s in &mut slices {
            s.label.mapv_inplace(|v| v); // labels stay, remap applied below on read
        }
        save_volume_png(&vdir, &slices).unwrap();
        let remap: BTreeMap<u32, u32> = (0..20u32).map(|i| (i, i)).collect();
        let loaded = load_volume(&vdir, &tax, Some(&remap)).unwrap();
        assert_eq!(loaded[0].present_ids(), slices[0].present_ids());
        // a table missing a present value errors
        let partial: BTreeMap<u32, u32> = [(0u32, 0u32)].into_iter().collect();
        assert!(load_volume(&vdir, &tax, Some(&partial)).is_err());
    }
}
