//! Multiview sampling, augmentation protocols and labeled image datasets.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Tensor;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Distortion dials, each in [0, 1]. Zero disables that distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentProtocol {
    pub crop_strength: f64,
    pub jitter_strength: f64,
    pub gray_strength: f64,
}

impl Default for AugmentProtocol {
    fn default() -> Self {
        AugmentProtocol {
            crop_strength: 0.5,
            jitter_strength: 0.5,
            gray_strength: 0.2,
        }
    }
}

impl AugmentProtocol {
    pub const NONE: AugmentProtocol = AugmentProtocol {
        crop_strength: 0.0,
        jitter_strength: 0.0,
        gray_strength: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("crop_strength", self.crop_strength),
            ("jitter_strength", self.jitter_strength),
            ("gray_strength", self.gray_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Corner-aligned bilinear sample of the `src` crop `(top, left, side_h, side_w)`
/// resized to the full `h×w` grid.
#[allow(clippy::too_many_arguments)]
fn crop_resize(x: &[f64], c: usize, h: usize, w: usize, top: usize, left: usize, sh: usize, sw: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize, side: usize| -> f64 {
        if n <= 1 || side <= 1 {
            0.0
        } else {
            i as f64 * (side - 1) as f64 / (n - 1) as f64
        }
    };
    let mut out = vec![0.0; c * h * w];
    for i in 0..h {
        let yi = coord(i, h, sh);
        let y0 = yi.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = yi - y0 as f64;
        for j in 0..w {
            let xj = coord(j, w, sw);
            let x0 = xj.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = xj - x0 as f64;
            for ch in 0..c {
                let at = |r: usize, q: usize| x[ch * h * w + (top + r) * w + left + q];
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                out[ch * h * w + i * w + j] = v;
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn luma_at(x: &[f64], hw: usize, p: usize) -> f64 {
    LUMA[0] * x[p] + LUMA[1] * x[hw + p] + LUMA[2] * x[2 * hw + p]
}

/// Applies crop, color jitter and grayscale in that order to one C×H×W image.
///
/// The generator is advanced by the same amount whatever the strengths, so
/// changing one dial does not reshuffle the randomness of the others.
pub fn augment(x: &Tensor, protocol: &AugmentProtocol, rng: &mut Rng) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(shape_err!("augment expects a C×H×W image, got {:?}", x.shape()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut data = x.data().to_vec();

    let u_scale: f64 = rng.random();
    let u_top: f64 = rng.random();
    let u_left: f64 = rng.random();
    if protocol.crop_strength > 0.0 {
        let lo = 1.0 - protocol.crop_strength * (1.0 - 1.0 / h.max(w) as f64);
        let scale = lo + (1.0 - lo) * u_scale;
        let sh = ((scale * h as f64).round() as usize).clamp(1, h);
        let sw = ((scale * w as f64).round() as usize).clamp(1, w);
        let top = ((u_top * (h - sh + 1) as f64) as usize).min(h - sh);
        let left = ((u_left * (w - sw + 1) as f64) as usize).min(w - sw);
        if (sh, sw) != (h, w) {
            data = crop_resize(&data, c, h, w, top, left, sh, sw);
        }
    }

    let j = protocol.jitter_strength;
    let factor = |rng: &mut Rng| 1.0 - 0.8 * j + 1.6 * j * rng.random::<f64>();
    let brightness = factor(rng);
    let contrast = factor(rng);
    let saturation = factor(rng);
    let hue = 0.2 * j * (2.0 * rng.random::<f64>() - 1.0);
    if j > 0.0 {
        for v in data.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let mean = if c == 3 {
            (0..hw).map(|p| luma_at(&data, hw, p)).sum::<f64>() / hw as f64
        } else {
            data.iter().sum::<f64>() / data.len() as f64
        };
        for v in data.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        if c == 3 {
            for p in 0..hw {
                let g = luma_at(&data, hw, p);
                for ch in 0..3 {
                    let v = &mut data[ch * hw + p];
                    *v = (g + saturation * (*v - g)).clamp(0.0, 1.0);
                }
            }
            for p in 0..hw {
                let (hh, s, v) = rgb_to_hsv(data[p], data[hw + p], data[2 * hw + p]);
                let (r, g, b) = hsv_to_rgb(hh + hue, s, v);
                data[p] = r;
                data[hw + p] = g;
                data[2 * hw + p] = b;
            }
        }
    }

    let u_gray: f64 = rng.random();
    if c == 3 && u_gray < protocol.gray_strength {
        for p in 0..hw {
            let g = luma_at(&data, hw, p);
            for ch in 0..3 {
                data[ch * hw + p] = g;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// L views sharing one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGroup {
    pub source_index: usize,
    pub views: Vec<Tensor>,
}

impl ViewGroup {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// L independent augmentations of `x`, seeded by (seed, step, source, view).
pub fn sample_views(
    x: &Tensor,
    protocol: &AugmentProtocol,
    l: usize,
    seed: u64,
    source_index: usize,
    step: u64,
) -> Result<ViewGroup> {
    if l == 0 {
        return Err(Error::InvalidArgument("view count L must be at least 1".into()));
    }
    protocol.validate()?;
    let views = (0..l)
        .map(|v| {
            let mut rng = substream(seed, Stream::Augment, &[step, source_index as u64, v as u64]);
            augment(x, protocol, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(ViewGroup { source_index, views })
}

/// View 0 is the image itself; the rest are drawn with replacement from
/// its class.
pub fn sample_same_class(dataset: &LabeledDataset, x_index: usize, l: usize, rng: &mut Rng) -> Result<ViewGroup> {
    if l == 0 {
        return Err(Error::InvalidArgument("view count L must be at least 1".into()));
    }
    let label = *dataset
        .labels
        .get(x_index)
        .ok_or_else(|| Error::InvalidArgument(format!("image index {x_index} out of range")))?;
    let members = dataset.class_members(label);
    if members.is_empty() {
        return Err(Error::Data(format!("class {label} has no members")));
    }
    let mut views = vec![dataset.image(x_index)?];
    for _ in 1..l {
        let pick = members[rng.random_range(0..members.len())];
        views.push(dataset.image(pick)?);
    }
    Ok(ViewGroup {
        source_index: x_index,
        views,
    })
}

/// Empirical conditional mass of `candidate` given the group: the fraction of
/// views equal to it.
pub fn view_conditional(group: &ViewGroup, candidate: &Tensor) -> f64 {
    if group.views.is_empty() {
        return 0.0;
    }
    let hits = group.views.iter().filter(|v| *v == candidate).count();
    hits as f64 / group.views.len() as f64
}

/// All offsets of a `child` patch inside a `parent` patch, each equally likely.
pub fn patch_conditional_support(parent: (usize, usize), child: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    if child.0 > parent.0 || child.1 > parent.1 || child.0 == 0 || child.1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "child patch {child:?} does not fit parent {parent:?}"
        )));
    }
    let (dh, dw) = (parent.0 - child.0 + 1, parent.1 - child.1 + 1);
    Ok((0..dh).flat_map(|i| (0..dw).map(move |j| (i, j))).collect())
}

/// Images in [0, 1] with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// N×C×H×W.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} not below class count {class_count}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W).
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        let (c, h, w) = self.image_dims();
        let per = c * h * w;
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!("image index {i} out of range")));
        }
        Tensor::new(vec![c, h, w], self.images.data()[i * per..(i + 1) * per].to_vec())
    }

    pub fn class_members(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(LabeledDataset {
            images: self.images.select_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// First `n_train` samples and the rest.
    pub fn split(&self, n_train: usize) -> Result<(Self, Self)> {
        if n_train > self.len() {
            return Err(Error::InvalidArgument("split larger than dataset".into()));
        }
        let a: Vec<usize> = (0..n_train).collect();
        let b: Vec<usize> = (n_train..self.len()).collect();
        Ok((self.subset(&a)?, self.subset(&b)?))
    }
}

/// Shape families used by [`generate_synthetic`], in class order.
pub const SHAPES: [&str; 8] = [
    "bars", "disc", "cross", "checker", "columns", "ring", "diagonal", "frame",
];

fn shape_mask(class: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<bool> {
    let (hf, wf) = (h as f64, w as f64);
    let m = hf.min(wf);
    let ci = hf * (0.3 + 0.4 * rng.random::<f64>());
    let cj = wf * (0.3 + 0.4 * rng.random::<f64>());
    let radius = m * (0.22 + 0.15 * rng.random::<f64>());
    let period = 2 + rng.random_range(0..2usize.max(h / 8));
    let phase = rng.random_range(0..period);
    let thick = 1.0 + (m / 8.0).floor() * rng.random::<f64>();
    let mut mask = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let d = ((y - ci).powi(2) + (x - cj).powi(2)).sqrt();
            mask[i * w + j] = match class {
                0 => (i + phase) % period == 0,
                1 => d <= radius,
                2 => (y - ci).abs() <= thick * 0.75 || (x - cj).abs() <= thick * 0.75,
                3 => ((i + phase) / 2 + (j + phase) / 2) % 2 == 0,
                4 => (j + phase) % period == 0,
                5 => (d - radius).abs() <= 0.8,
                6 => (i + j + phase) % period == 0,
                _ => {
                    let inside = (y - ci).abs() <= radius && (x - cj).abs() <= radius;
                    let edge = (y - ci).abs() > radius - 1.0 || (x - cj).abs() > radius - 1.0;
                    inside && edge
                }
            };
        }
    }
    mask
}

/// Procedurally rendered shape classes at random positions and colors,
/// balanced across classes (class of sample i is i mod classes).
pub fn generate_synthetic(n: usize, classes: usize, dims: (usize, usize), seed: u64) -> Result<LabeledDataset> {
    if classes == 0 || classes > SHAPES.len() {
        return Err(Error::InvalidArgument(format!(
            "synthetic data supports 1..={} classes",
            SHAPES.len()
        )));
    }
    if dims.0 < 8 || dims.1 < 8 {
        return Err(Error::InvalidArgument("synthetic images must be at least 8x8".into()));
    }
    let (h, w) = dims;
    let hw = h * w;
    let mut data = Vec::with_capacity(n * 3 * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let mut rng = substream(seed, Stream::Data, &[i as u64]);
        let mask = shape_mask(class, h, w, &mut rng);
        let fg: Vec<f64> = (0..3).map(|_| 0.55 + 0.45 * rng.random::<f64>()).collect();
        let bg: Vec<f64> = (0..3).map(|_| 0.35 * rng.random::<f64>()).collect();
        for ch in 0..3 {
            for p in 0..hw {
                let base = if mask[p] { fg[ch] } else { bg[ch] };
                let jitter = 0.04 * (rng.random::<f64>() - 0.5);
                data.push((base + jitter).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    LabeledDataset::new(Tensor::new(vec![n, 3, h, w], data)?, labels, classes)
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Parses CIFAR-10 binary records: one label byte, then 1024 bytes each of
/// red, green and blue in row-major order.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "CIFAR file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {r}: label byte {} exceeds 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        10,
    )
}

pub fn load_cifar10(path: &Path) -> Result<LabeledDataset> {
    parse_cifar10(&std::fs::read(path)?)
}

/// Encodes 3×32×32 images with labels ≤ 9 in the CIFAR-10 layout, rounding
/// pixels to the nearest 1/255.
pub fn encode_cifar10(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    if dataset.image_dims() != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(shape_err!("CIFAR layout needs 3x32x32 images, got {:?}", dataset.image_dims()));
    }
    if dataset.labels.iter().any(|&l| l > 9) {
        return Err(Error::Data("CIFAR labels must be at most 9".into()));
    }
    let per = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (i, &label) in dataset.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            dataset.images.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

pub fn save_cifar10(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_cifar10(dataset)?)?;
    Ok(())
}
