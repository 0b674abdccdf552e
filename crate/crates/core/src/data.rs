//! Dataset ingestion: IDX archives, class-per-directory image trees and
//! pen-stroke logs, all mapped onto 32×32×3 images with values in `[0, 1]`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use image::imageops::FilterType;
use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{INPUT_CHANNELS, INPUT_SIDE};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Side of the box strokes are scaled into.
pub const STROKE_BOX: usize = 28;
/// Border mean above which an image is taken to have a white background.
pub const INVERT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [INPUT_SIDE, INPUT_SIDE, INPUT_CHANNELS] {
                return Err(Error::mismatch(
                    "dataset image",
                    &[INPUT_SIDE, INPUT_SIDE, INPUT_CHANNELS],
                    img.shape(),
                ));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("image {i} has values outside [0, 1]")));
            }
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Samples per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stack the images at `indices` into an `[n, 32, 32, 3]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = INPUT_SIDE * INPUT_SIDE * INPUT_CHANNELS;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("sample index {i} out of range for {} samples", self.len()))
            })?;
            data.extend_from_slice(img.data());
            labels.push(self.labels[i]);
        }
        let batch = Tensor::new(vec![indices.len(), INPUT_SIDE, INPUT_SIDE, INPUT_CHANNELS], data)?;
        Ok((batch, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
            }
            images.push(self.images[i].clone());
            labels.push(self.labels[i]);
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names: self.class_names.clone(),
        })
    }

    /// First `per_class` samples of each class, in dataset order.
    pub fn take_per_class(&self, per_class: usize) -> Result<Self> {
        let mut seen = vec![0; self.num_classes()];
        let mut keep = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] < per_class {
                seen[l] += 1;
                keep.push(i);
            }
        }
        self.subset(&keep)
    }
}

/// Replicate a single-channel `side × side` plane into an `[H, W, 3]` tensor.
fn gray_to_input(plane: Vec<f32>) -> Result<Tensor> {
    let data = plane.iter().flat_map(|&v| [v; INPUT_CHANNELS]).collect();
    Tensor::new(vec![INPUT_SIDE, INPUT_SIDE, INPUT_CHANNELS], data)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("IDX", format!("truncated {what} header")))
}

/// Decode an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("IDX", format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            "IDX",
            format!("truncated image data: need {need} bytes, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("IDX", format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            "IDX",
            format!("truncated label data: need {n} bytes, found {}", body.len()),
        ));
    }
    Ok(&body[..n])
}

/// Load an IDX image/label pair (optionally gzip-compressed). Images up to
/// 32×32 are zero-padded to 32×32, centred; class names are the label
/// values as strings.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let image_bytes = read_maybe_gz(images_path.as_ref())?;
    let label_bytes = read_maybe_gz(labels_path.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
    }
    if rows > INPUT_SIDE || cols > INPUT_SIDE || rows == 0 || cols == 0 {
        return Err(Error::format("IDX", format!("unsupported image size {rows}x{cols}")));
    }
    let top = (INPUT_SIDE - rows) / 2;
    let left = (INPUT_SIDE - cols) / 2;
    let mut images = Vec::with_capacity(n);
    for raw in pixels.chunks(rows * cols) {
        let mut plane = vec![0.0f32; INPUT_SIDE * INPUT_SIDE];
        for i in 0..rows {
            for j in 0..cols {
                plane[(top + i) * INPUT_SIDE + left + j] = raw[i * cols + j] as f32 / 255.0;
            }
        }
        images.push(gray_to_input(plane)?);
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let class_names = (0..classes).map(|c| c.to_string()).collect();
    LabeledDataset::new(images, labels, class_names)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if !hidden {
            entries.push(path);
        }
    }
    entries.sort();
    Ok(entries)
}

fn border_mean(plane: &[f32]) -> f32 {
    let s = INPUT_SIDE;
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..s {
        for j in 0..s {
            if i == 0 || j == 0 || i == s - 1 || j == s - 1 {
                sum += plane[i * s + j];
                count += 1;
            }
        }
    }
    sum / count as f32
}

/// Load one grayscale image file, resized to 32×32 (bilinear) and scaled to
/// `[0, 1]`; white-background images are inverted when `auto_invert` is set.
pub fn load_image_file(path: &Path, auto_invert: bool) -> Result<Tensor> {
    let mut gray = image::open(path)?.to_luma8();
    if gray.dimensions() != (INPUT_SIDE as u32, INPUT_SIDE as u32) {
        gray = image::imageops::resize(&gray, INPUT_SIDE as u32, INPUT_SIDE as u32, FilterType::Triangle);
    }
    let mut plane: Vec<f32> = gray.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    if auto_invert && border_mean(&plane) > INVERT_THRESHOLD {
        plane.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    gray_to_input(plane)
}

/// Load `<root>/<class>/<image>` trees; classes are indexed in sorted
/// directory-name order.
pub fn load_image_dir(root: impl AsRef<Path>, auto_invert: bool) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        for file in files {
            images.push(load_image_file(&file, auto_invert)?);
            labels.push(label);
        }
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    LabeledDataset::new(images, labels, class_names)
}

/// One online sample: pen-down-to-pen-up point sequences. `y` grows
/// downwards, as in image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeSample {
    pub label: String,
    pub strokes: Vec<Vec<[f64; 2]>>,
}

impl StrokeSample {
    pub fn validate(&self) -> Result<()> {
        if self.strokes.is_empty() {
            return Err(Error::Dataset(format!("sample '{}' has no strokes", self.label)));
        }
        if self.strokes.iter().any(|s| s.is_empty()) {
            return Err(Error::Dataset(format!("sample '{}' has an empty stroke", self.label)));
        }
        if self.strokes.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("sample '{}' has non-finite coordinates", self.label)));
        }
        Ok(())
    }
}

fn draw_line(plane: &mut [f32], (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        plane[y as usize * INPUT_SIDE + x as usize] = 1.0;
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Render strokes with a 1-pixel pen, scaled uniformly into a 28×28 box
/// centred on the 32×32 canvas.
pub fn rasterize_strokes(sample: &StrokeSample) -> Result<Tensor> {
    sample.validate()?;
    let points = sample.strokes.iter().flatten();
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &[x, y] in points {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    let extent = (max_x - min_x).max(max_y - min_y);
    let span = (STROKE_BOX - 1) as f64;
    let margin = ((INPUT_SIDE - STROKE_BOX) / 2) as f64;
    // Normalised coordinates in [0, 1]; a degenerate glyph sits at the centre.
    let unit = |v: f64, min: f64| if extent > 0.0 { (v - min) / extent } else { 0.0 };
    let off_x = margin + (span - unit(max_x, min_x) * span) / 2.0;
    let off_y = margin + (span - unit(max_y, min_y) * span) / 2.0;
    let lo = margin as i64;
    let hi = lo + span as i64;
    let to_pixel = |[x, y]: [f64; 2]| -> (i64, i64) {
        let px = (unit(x, min_x) * span + off_x).round() as i64;
        let py = (unit(y, min_y) * span + off_y).round() as i64;
        (px.clamp(lo, hi), py.clamp(lo, hi))
    };
    let mut plane = vec![0.0f32; INPUT_SIDE * INPUT_SIDE];
    for stroke in &sample.strokes {
        let mut prev = to_pixel(stroke[0]);
        draw_line(&mut plane, prev, prev);
        for &p in &stroke[1..] {
            let cur = to_pixel(p);
            draw_line(&mut plane, prev, cur);
            prev = cur;
        }
    }
    gray_to_input(plane)
}

/// Load every `*.json` stroke sample under `root` (sorted by file name);
/// classes are the sorted distinct labels.
pub fn load_stroke_dir(root: impl AsRef<Path>) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let mut samples = Vec::new();
    for path in sorted_entries(root)? {
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let sample: StrokeSample = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("no stroke samples in {}", root.display())));
    }
    let class_names: Vec<String> = samples
        .iter()
        .map(|s| s.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in &samples {
        images.push(rasterize_strokes(s)?);
        labels.push(class_names.binary_search(&s.label).expect("label collected above"));
    }
    LabeledDataset::new(images, labels, class_names)
}

/// Stratified shuffle split of sample indices; both halves are returned in
/// ascending order.
pub fn split_indices(labels: &[usize], num_classes: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::Dataset(format!("label {l} out of range")))?
            .push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Dataset(format!("class {class} has fewer than 2 samples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_dataset(d: &LabeledDataset, ratio: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = split_indices(d.labels(), d.num_classes(), ratio, seed)?;
    Ok((d.subset(&train)?, d.subset(&test)?))
}

/// Write channel 0 of an `[H, W, C]` image as an 8-bit grayscale PNG.
pub fn save_png(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = match img.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::mismatch("png image", &[0, 0, 0], s)),
    };
    let mut out = GrayImage::new(w as u32, h as u32);
    for (k, px) in out.pixels_mut().enumerate() {
        let v = img.data()[k * c].clamp(0.0, 1.0);
        *px = Luma([(v * 255.0).round() as u8]);
    }
    out.save(path.as_ref())?;
    Ok(())
}
