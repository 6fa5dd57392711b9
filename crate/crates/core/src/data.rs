//! Labeled image datasets and the procedural shapes generator.
//!
//! Four classes are drawn on a 16x16 canvas: horizontal bar, vertical bar,
//! cross, and disk. The public style uses thin centered strokes, bright on
//! dark, with light noise. The private style uses thick strokes shifted by
//! up to two pixels, dark on bright, with more noise.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const SHAPE_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; SHAPE_CLASSES] = ["hbar", "vbar", "cross", "disk"];

/// Images `[N, 1, H, W]` in `[-1, 1]` with labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be [N, C, H, W], got {s:?}"),
            ));
        }
        if s[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "dataset",
                format!("{} images with {} labels", s[0], labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Images and labels of `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels, self.num_classes)
    }

    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("no datasets to concatenate"))?;
        let images = Tensor::cat_rows(&parts.iter().map(|p| p.images.clone()).collect::<Vec<_>>())?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Self::new(images, labels, first.num_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Public,
    Private,
}

impl Style {
    fn tag(self) -> u64 {
        match self {
            Style::Public => 0,
            Style::Private => 1,
        }
    }
}

impl std::str::FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "public" => Ok(Style::Public),
            "private" => Ok(Style::Private),
            other => Err(Error::Config(format!("unknown style `{other}` (public|private)"))),
        }
    }
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Style::Public => "public",
            Style::Private => "private",
        })
    }
}

struct Stroke {
    cx: f64,
    cy: f64,
    half_len: f64,
    half_width: f64,
    radius: f64,
}

fn covered(class: usize, s: &Stroke, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - s.cx, y - s.cy);
    let hbar = dy.abs() <= s.half_width && dx.abs() <= s.half_len;
    let vbar = dx.abs() <= s.half_width && dy.abs() <= s.half_len;
    match class {
        0 => hbar,
        1 => vbar,
        2 => hbar || vbar,
        _ => dx * dx + dy * dy <= s.radius * s.radius,
    }
}

fn render<R: Rng + ?Sized>(class: usize, style: Style, rng: &mut R) -> Vec<f32> {
    let n = IMAGE_SIZE as f64;
    let (width, max_shift, noise, fg, bg) = match style {
        Style::Public => (2.0, 0i64, 0.05, 1.0, -1.0),
        Style::Private => (4.0, 2i64, 0.1, -1.0, 1.0),
    };
    let shift_x = rng.random_range(-max_shift..=max_shift) as f64;
    let shift_y = rng.random_range(-max_shift..=max_shift) as f64;
    let stroke = Stroke {
        cx: n / 2.0 + shift_x,
        cy: n / 2.0 + shift_y,
        half_len: rng.random_range(4.0..6.0),
        half_width: width / 2.0,
        radius: match style {
            Style::Public => rng.random_range(2.5..3.5),
            Style::Private => rng.random_range(3.5..5.0),
        },
    };
    let contrast = rng.random_range(0.8..1.0);
    let mut img = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            // 2x2 supersampling for soft edges.
            let mut cover = 0.0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if covered(class, &stroke, px as f64 + sx, py as f64 + sy) {
                    cover += 0.25;
                }
            }
            let v = bg + (fg - bg) * cover * contrast + noise * rng::normal(rng);
            img.push(v.clamp(-1.0, 1.0) as f32);
        }
    }
    img
}

/// `n_per_class` images of each class in `style`, interleaved by class
/// (`label[i] = i % num_classes`). Each class draws from its own substream,
/// so the output is a pure function of `(style, n_per_class, seed)`.
pub fn gen_shapes_dataset(style: Style, n_per_class: usize, num_classes: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    if num_classes == 0 || num_classes > SHAPE_CLASSES {
        return Err(Error::invalid(format!(
            "shapes dataset has 1..={SHAPE_CLASSES} classes, got {num_classes}"
        )));
    }
    let per_class: Vec<Vec<Vec<f32>>> = (0..num_classes)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::substream(seed, domain::DATA, style.tag() * 1024 + c as u64);
            (0..n_per_class).map(|_| render(c, style, &mut r)).collect()
        })
        .collect();
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = Vec::with_capacity(n_per_class * num_classes * px);
    let mut labels = Vec::with_capacity(n_per_class * num_classes);
    for i in 0..n_per_class {
        for (c, imgs) in per_class.iter().enumerate() {
            data.extend_from_slice(&imgs[i]);
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![labels.len(), 1, IMAGE_SIZE, IMAGE_SIZE], data)?;
    LabeledDataset::new(images, labels, num_classes)
}
