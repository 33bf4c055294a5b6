//! Click annotations to distortion-aware saliency maps.
//!
//! Marked points become a binary fixation map, which is smoothed with a
//! separable Gaussian (kernel truncated at `ceil(3 sigma)` and renormalized,
//! zero padding outside the image).

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::model::{FixationAnnotation, ModelError, Point};

/// Smoothing width used for the reference ground-truth maps, in pixels.
pub const DEFAULT_SIGMA: f64 = 5.0;

const RAW_MAGIC: &[u8; 4] = b"G3DS";

#[derive(Debug, thiserror::Error)]
pub enum SaliencyError {
    #[error(transparent)]
    Annotation(#[from] ModelError),

    #[error("sigma must be > 0")]
    InvalidSigma(f64),

    #[error("annotations disagree on image size: {expected:?} vs {got:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },

    #[error("no annotations to merge")]
    NoAnnotations,

    #[error("map is constant; cannot standardize a zero-variance map")]
    ZeroVariance,

    #[error("map has no positive mass to normalize by")]
    NonPositive,

    #[error("grid holds {got} values but {width}x{height} needs {expected}")]
    GridSize { width: u32, height: u32, expected: usize, got: usize },

    #[error("bad map file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary map with ones exactly at annotated pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixationMap {
    width: u32,
    height: u32,
    grid: Vec<u8>,
}

impl FixationMap {
    pub fn empty(width: u32, height: u32) -> Self {
        FixationMap {
            width,
            height,
            grid: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_points(width: u32, height: u32, points: &[Point]) -> Result<Self, SaliencyError> {
        let ann = FixationAnnotation {
            item_id: "".into(),
            annotator_id: String::new(),
            image_width: width,
            image_height: height,
            points: points.to_vec(),
        };
        build_fixation_map(&ann)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.grid[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32) {
        self.grid[y as usize * self.width as usize + x as usize] = 1;
    }

    /// Row-major cells, one byte each (0 or 1).
    pub fn cells(&self) -> &[u8] {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&c| c != 0).count()
    }

    pub fn points(&self) -> Vec<Point> {
        let w = self.width as usize;
        self.grid
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(i, _)| Point::new((i % w) as i64, (i / w) as i64))
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|&c| c as f64).collect()
    }
}

/// Normalization state of a [`SaliencyMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Raw,
    MaxOne,
    SumOne,
    ZStandardized,
}

impl Norm {
    pub fn code(self) -> u32 {
        match self {
            Norm::Raw => 0,
            Norm::MaxOne => 1,
            Norm::SumOne => 2,
            Norm::ZStandardized => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Norm> {
        match code {
            0 => Some(Norm::Raw),
            1 => Some(Norm::MaxOne),
            2 => Some(Norm::SumOne),
            3 => Some(Norm::ZStandardized),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    width: u32,
    height: u32,
    data: Vec<f64>,
    norm: Norm,
}

impl SaliencyMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>, norm: Norm) -> Result<Self, SaliencyError> {
        let expected = width as usize * height as usize;
        if data.len() != expected || expected == 0 {
            return Err(SaliencyError::GridSize {
                width,
                height,
                expected,
                got: data.len(),
            });
        }
        Ok(SaliencyMap {
            width,
            height,
            data,
            norm,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Binary map with ones at every annotated point; repeated points collapse.
pub fn build_fixation_map(ann: &FixationAnnotation) -> Result<FixationMap, SaliencyError> {
    ann.validate()?;
    let mut map = FixationMap::empty(ann.image_width, ann.image_height);
    for p in &ann.points {
        map.set(p.x as u32, p.y as u32);
    }
    Ok(map)
}

/// Union of several annotators' marks on one item.
pub fn merge_annotations(anns: &[FixationAnnotation]) -> Result<FixationMap, SaliencyError> {
    let first = anns.first().ok_or(SaliencyError::NoAnnotations)?;
    let dims = (first.image_width, first.image_height);
    let mut points = BTreeSet::new();
    for ann in anns {
        let got = (ann.image_width, ann.image_height);
        if got != dims {
            return Err(SaliencyError::DimensionMismatch { expected: dims, got });
        }
        ann.validate()?;
        points.extend(ann.points.iter().copied());
    }
    let mut map = FixationMap::empty(dims.0, dims.1);
    for p in points {
        map.set(p.x as u32, p.y as u32);
    }
    Ok(map)
}

/// Truncation radius for a given sigma.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// One-dimensional Gaussian weights over `[-r, r]`, summing to one.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, SaliencyError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(SaliencyError::InvalidSigma(sigma));
    }
    let r = kernel_radius(sigma) as i64;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / denom).exp()).collect();
    let total: f64 = k.iter().sum();
    for w in &mut k {
        *w /= total;
    }
    Ok(k)
}

/// Separable Gaussian convolution of a row-major grid with zero padding.
pub fn blur_grid(width: u32, height: u32, grid: &[f64], sigma: f64) -> Result<Vec<f64>, SaliencyError> {
    let (w, h) = (width as usize, height as usize);
    if grid.len() != w * h {
        return Err(SaliencyError::GridSize {
            width,
            height,
            expected: w * h,
            got: grid.len(),
        });
    }
    let kernel = gaussian_kernel(sigma)?;
    let r = kernel.len() / 2;

    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        let src = &grid[y * w..(y + 1) * w];
        let dst = &mut rows[y * w..(y + 1) * w];
        for (x, v) in src.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            for (tx, out) in dst.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *out += v * kernel[tx + r - x];
            }
        }
    }

    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for ty in lo..=hi {
            let weight = kernel[ty + r - y];
            let src = &rows[y * w..(y + 1) * w];
            let dst = &mut out[ty * w..(ty + 1) * w];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += weight * s;
            }
        }
    }
    Ok(out)
}

/// Smooths a fixation map into a raw (unnormalized) saliency map.
pub fn gaussian_blur(map: &FixationMap, sigma: f64) -> Result<SaliencyMap, SaliencyError> {
    let data = blur_grid(map.width, map.height, &map.as_f64(), sigma)?;
    SaliencyMap::new(map.width, map.height, data, Norm::Raw)
}

/// Whether [`normalize`] rescaled the map or passed an all-zero map through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeStatus {
    Scaled,
    AllZero,
}

/// Rescales a map to the requested convention.
pub fn normalize(map: &SaliencyMap, target: Norm) -> Result<(SaliencyMap, NormalizeStatus), SaliencyError> {
    let with = |data: Vec<f64>| SaliencyMap {
        width: map.width,
        height: map.height,
        data,
        norm: target,
    };
    match target {
        Norm::Raw => Ok((with(map.data.clone()), NormalizeStatus::Scaled)),
        Norm::MaxOne | Norm::SumOne => {
            if map.is_all_zero() {
                return Ok((with(map.data.clone()), NormalizeStatus::AllZero));
            }
            let by = if target == Norm::MaxOne { map.max() } else { map.sum() };
            if !(by > 0.0) {
                return Err(SaliencyError::NonPositive);
            }
            Ok((with(map.data.iter().map(|v| v / by).collect()), NormalizeStatus::Scaled))
        }
        Norm::ZStandardized => {
            let z = standardize(&map.data).ok_or(SaliencyError::ZeroVariance)?;
            Ok((with(z), NormalizeStatus::Scaled))
        }
    }
}

/// Zero mean, unit population standard deviation. `None` for constant input.
pub(crate) fn standardize(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return None;
    }
    Some(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Binary PGM (P5, maxval 255). Maps not already max-normalized are
/// max-normalized first; each cell is quantized as `round(255 v)`.
pub fn write_pgm(map: &SaliencyMap, mut w: impl Write) -> Result<(), SaliencyError> {
    let scaled;
    let src = if map.norm == Norm::MaxOne {
        map
    } else {
        scaled = normalize(map, Norm::MaxOne)?.0;
        &scaled
    };
    write!(w, "P5\n{} {}\n255\n", src.width, src.height)?;
    let bytes: Vec<u8> = src.data.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Raw float grid: `G3DS`, u32 width, u32 height, u32 norm code, then
/// `width * height` little-endian f32 values.
pub fn write_raw(map: &SaliencyMap, mut w: impl Write) -> Result<(), SaliencyError> {
    let mut buf = Vec::with_capacity(16 + 4 * map.data.len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&map.width.to_le_bytes());
    buf.extend_from_slice(&map.height.to_le_bytes());
    buf.extend_from_slice(&map.norm.code().to_le_bytes());
    for v in &map.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_raw(mut r: impl Read) -> Result<SaliencyMap, SaliencyError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(SaliencyError::Format("missing G3DS header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (width, height, code) = (word(4), word(8), word(12));
    let norm = Norm::from_code(code).ok_or_else(|| SaliencyError::Format(format!("unknown norm code {code}")))?;
    let n = width as usize * height as usize;
    if bytes.len() != 16 + 4 * n {
        return Err(SaliencyError::Format(format!(
            "expected {} payload bytes for {width}x{height}, found {}",
            4 * n,
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SaliencyMap::new(width, height, data, norm)
}
