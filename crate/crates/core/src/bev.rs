//! Sparse-to-dense projection onto the bird's-eye-view plane.
//!
//! A voxel centroid `(x, z)` lands in pixel
//! `(u, v) = (⌊(x + b_x) / x_q⌋, ⌊(z + b_z) / z_q⌋)` with `x_q = 2 b_x / width`
//! and `z_q = 2 b_z / height`. Only centroids inside the half-open window
//! `[-b_x, b_x) × [-b_z, b_z)` are kept. When several voxels share a pixel a
//! single winner is drawn per pixel; features and labels are both taken from
//! that winner so the two rasters always agree.

use serde::{Deserialize, Serialize};

use crate::cloud::ClassId;
use crate::error::{Error, Result};
use crate::seed::mix64;
use crate::voxel::{VoxelGrid, VoxelKey};

pub const DEFAULT_BEV_PIXELS: usize = 168;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevProjectionConfig {
    /// Half-extent along x, meters.
    pub bound_x: f64,
    /// Half-extent along z, meters.
    pub bound_z: f64,
    pub width: usize,
    pub height: usize,
    pub collision_seed: u64,
}

impl Default for BevProjectionConfig {
    fn default() -> Self {
        BevProjectionConfig {
            bound_x: 50.0,
            bound_z: 50.0,
            width: DEFAULT_BEV_PIXELS,
            height: DEFAULT_BEV_PIXELS,
            collision_seed: 0,
        }
    }
}

impl BevProjectionConfig {
    pub fn new(bound_x: f64, bound_z: f64, width: usize, height: usize) -> Result<Self> {
        let cfg = BevProjectionConfig {
            bound_x,
            bound_z,
            width,
            height,
            collision_seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Square window of half-extent `bound` meters at the default 168×168 raster.
    pub fn square(bound: f64) -> Result<Self> {
        Self::new(bound, bound, DEFAULT_BEV_PIXELS, DEFAULT_BEV_PIXELS)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_bound = |b: f64| b > 0.0 && b.is_finite();
        if !ok_bound(self.bound_x) || !ok_bound(self.bound_z) {
            return Err(Error::validation(format!(
                "BEV bounds must be positive, got ({}, {})",
                self.bound_x, self.bound_z
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("BEV raster must be at least 1×1"));
        }
        Ok(())
    }

    /// Meters per pixel along x.
    pub fn x_quant(&self) -> f64 {
        2.0 * self.bound_x / self.width as f64
    }

    /// Meters per pixel along z.
    pub fn z_quant(&self) -> f64 {
        2.0 * self.bound_z / self.height as f64
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.collision_seed = seed;
        self
    }

    /// Same bounds with both raster dimensions scaled by `factor`, rounded.
    pub fn with_resolution(mut self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::validation(format!("bad BEV resolution {factor}")));
        }
        self.width = (self.width as f64 * factor).round() as usize;
        self.height = (self.height as f64 * factor).round() as usize;
        self.validate()?;
        Ok(self)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pixel {
    /// Column, from x.
    pub u: usize,
    /// Row, from z.
    pub v: usize,
}

fn axis_index(c: f64, bound: f64, quant: f64, size: usize) -> Option<usize> {
    if !(c >= -bound && c < bound) {
        return None;
    }
    // round-off just below +bound can land on `size`
    Some((((c + bound) / quant).floor() as usize).min(size - 1))
}

/// `None` means out of bounds.
pub fn project_index(x: f64, z: f64, cfg: &BevProjectionConfig) -> Option<Pixel> {
    let u = axis_index(x, cfg.bound_x, cfg.x_quant(), cfg.width)?;
    let v = axis_index(z, cfg.bound_z, cfg.z_quant(), cfg.height)?;
    Some(Pixel { u, v })
}

fn key_priority(key: VoxelKey, seed: u64) -> u64 {
    let [i, j, k] = key.map(|c| c as u32 as u64);
    mix64(seed ^ mix64(mix64(i) ^ j.rotate_left(21) ^ k.rotate_left(42)))
}

/// Winning voxel per pixel, row-major (`v * width + u`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevAssignment {
    pub width: usize,
    pub height: usize,
    pub winners: Vec<Option<u32>>,
}

impl BevAssignment {
    pub fn occupied(&self) -> usize {
        self.winners.iter().filter(|w| w.is_some()).count()
    }
}

/// Resolves which voxel owns each pixel.
///
/// Each voxel draws a priority from `(collision_seed, cell key)`; the highest
/// priority among colliders wins. The draw is uniform over colliders and does
/// not depend on iteration order.
pub fn assign(grid: &VoxelGrid, cfg: &BevProjectionConfig) -> BevAssignment {
    let mut winners: Vec<Option<u32>> = vec![None; cfg.pixels()];
    let mut best = vec![0u64; cfg.pixels()];
    for (idx, cell) in grid.cells().iter().enumerate() {
        let Some(px) = project_index(cell.centroid[0], cell.centroid[2], cfg) else {
            continue;
        };
        let slot = px.v * cfg.width + px.u;
        let prio = key_priority(cell.key, cfg.collision_seed);
        if winners[slot].is_none() || prio > best[slot] {
            winners[slot] = Some(idx as u32);
            best[slot] = prio;
        }
    }
    BevAssignment {
        width: cfg.width,
        height: cfg.height,
        winners,
    }
}

/// Dense raster, channel-major: value `(c, v, u)` lives at `(c * height + v) * width + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub occupied: Vec<bool>,
}

impl DenseFeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        DenseFeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            occupied: vec![false; width * height],
        }
    }

    pub fn at(&self, c: usize, v: usize, u: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    pub fn pixel(&self, v: usize, u: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, v, u)).collect()
    }
}

/// Scatter per-voxel features (row-major `cells × channels`) into a zeroed raster.
pub fn scatter_features(
    assignment: &BevAssignment,
    feats: &[f64],
    channels: usize,
) -> DenseFeatureMap {
    let mut map = DenseFeatureMap::zeros(assignment.width, assignment.height, channels);
    let plane = assignment.width * assignment.height;
    for (p, w) in assignment.winners.iter().enumerate() {
        if let Some(w) = *w {
            map.occupied[p] = true;
            let row = &feats[w as usize * channels..(w as usize + 1) * channels];
            for (c, &f) in row.iter().enumerate() {
                map.data[c * plane + p] = f;
            }
        }
    }
    map
}

pub fn project_features(
    grid: &VoxelGrid,
    feats: &[f64],
    channels: usize,
    cfg: &BevProjectionConfig,
) -> Result<DenseFeatureMap> {
    cfg.validate()?;
    if channels == 0 || feats.len() != grid.len() * channels {
        return Err(Error::validation(format!(
            "feature buffer of {} values does not match {} cells × {channels} channels",
            feats.len(),
            grid.len()
        )));
    }
    Ok(scatter_features(&assign(grid, cfg), feats, channels))
}

/// Row-major class raster; unfilled pixels are `IGNORE`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<ClassId>,
}

impl BevLabelMap {
    pub fn filled(width: usize, height: usize, label: ClassId) -> Self {
        BevLabelMap {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn at(&self, v: usize, u: usize) -> ClassId {
        self.labels[v * self.width + u]
    }

    /// Binary PGM (`P5`), one byte per pixel holding the class id, 255 for `IGNORE`, top row `v = 0`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.labels.iter().map(|l| {
            if l.is_ignore() {
                255
            } else {
                l.0.min(254) as u8
            }
        }));
        out
    }
}

pub fn labels_from_assignment(grid: &VoxelGrid, assignment: &BevAssignment) -> BevLabelMap {
    let cells = grid.cells();
    BevLabelMap {
        width: assignment.width,
        height: assignment.height,
        labels: assignment
            .winners
            .iter()
            .map(|w| w.map_or(ClassId::IGNORE, |w| cells[w as usize].label))
            .collect(),
    }
}

pub fn project_labels(grid: &VoxelGrid, cfg: &BevProjectionConfig) -> BevLabelMap {
    labels_from_assignment(grid, &assign(grid, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            window: 5,
            stride: 3,
            padding: 1,
        }
    }
}

impl PoolSpec {
    pub fn output_dim(&self, dim: usize) -> Result<usize> {
        let padded = dim + 2 * self.padding;
        if self.window == 0 || self.stride == 0 || padded < self.window || self.padding >= self.window {
            return Err(Error::validation(format!(
                "pooling window {} stride {} padding {} gives no output for size {dim}",
                self.window, self.stride, self.padding
            )));
        }
        Ok((padded - self.window) / self.stride + 1)
    }
}

/// Max pooling over a channel-major buffer. Returns the pooled buffer and,
/// per output value, the flat input index of its maximum (first in row-major
/// window order on ties). Padding never wins.
pub fn max_pool(
    data: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    spec: PoolSpec,
) -> Result<(Vec<f64>, Vec<usize>, usize, usize)> {
    let oh = spec.output_dim(height)?;
    let ow = spec.output_dim(width)?;
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    let pad = spec.padding as isize;
    for c in 0..channels {
        let base = c * height * width;
        for ov in 0..oh {
            let v0 = (ov * spec.stride) as isize - pad;
            let vr = v0.max(0) as usize..((v0 + spec.window as isize) as usize).min(height);
            for ou in 0..ow {
                let u0 = (ou * spec.stride) as isize - pad;
                let ur = u0.max(0) as usize..((u0 + spec.window as isize) as usize).min(width);
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for v in vr.clone() {
                    for u in ur.clone() {
                        let i = base + v * width + u;
                        if data[i] > best || best_at == usize::MAX {
                            best = data[i];
                            best_at = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    Ok((out, arg, oh, ow))
}

pub fn pool_features(map: &DenseFeatureMap, spec: PoolSpec) -> Result<DenseFeatureMap> {
    if map.width == 0 || map.height == 0 || map.channels == 0 {
        return Err(Error::validation("cannot pool an empty map"));
    }
    let (data, _, oh, ow) = max_pool(&map.data, map.channels, map.height, map.width, spec)?;
    let occ: Vec<f64> = map.occupied.iter().map(|&o| o as u8 as f64).collect();
    let (occ, _, _, _) = max_pool(&occ, 1, map.height, map.width, spec)?;
    Ok(DenseFeatureMap {
        width: ow,
        height: oh,
        channels: map.channels,
        data,
        occupied: occ.iter().map(|&o| o > 0.0).collect(),
    })
}

fn nearest_source(i: usize, factor: f64, size: usize) -> usize {
    let s = ((i as f64 + 0.5) * factor - 0.5).floor();
    (s.max(0.0) as usize).min(size - 1)
}

/// Nearest-neighbour resampling on pixel centres to an explicit size.
pub fn resample_labels(labels: &BevLabelMap, width: usize, height: usize) -> Result<BevLabelMap> {
    if width == 0 || height == 0 || labels.width == 0 || labels.height == 0 {
        return Err(Error::validation("label resampling to or from an empty raster"));
    }
    let fx = labels.width as f64 / width as f64;
    let fz = labels.height as f64 / height as f64;
    let cols: Vec<usize> = (0..width).map(|u| nearest_source(u, fx, labels.width)).collect();
    let mut out = Vec::with_capacity(width * height);
    for v in 0..height {
        let sv = nearest_source(v, fz, labels.height);
        out.extend(cols.iter().map(|&su| labels.at(sv, su)));
    }
    Ok(BevLabelMap {
        width,
        height,
        labels: out,
    })
}

/// Shrinks both dimensions by `factor` (`floor(dim / factor)`).
pub fn downsample_labels(labels: &BevLabelMap, factor: f64) -> Result<BevLabelMap> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::validation(format!("downsampling factor {factor} must be ≥ 1")));
    }
    let w = (labels.width as f64 / factor).floor() as usize;
    let h = (labels.height as f64 / factor).floor() as usize;
    resample_labels(labels, w, h)
}
