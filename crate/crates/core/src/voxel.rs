//! Sparse voxelization of point clouds.

use std::collections::BTreeMap;

use crate::cloud::{ClassId, PointCloud};
use crate::error::{Error, Result};

/// Integer cell coordinate `(i, j, k)`; ordering is lexicographic.
pub type VoxelKey = [i32; 3];

/// Default cell edge in meters.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.05;

/// Channels produced by [`VoxelGrid::input_features`].
pub const INPUT_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelCell {
    pub key: VoxelKey,
    pub point_indices: Vec<u32>,
    pub label: ClassId,
    pub centroid: [f64; 3],
    /// Mean intensity of member points reporting one, else 0.
    pub mean_intensity: f64,
}

/// Occupied cells in canonical (lexicographic key) order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    voxel_size: f64,
    cells: Vec<VoxelCell>,
}

pub fn cell_key(p: [f64; 3], voxel_size: f64) -> VoxelKey {
    p.map(|c| (c / voxel_size).floor() as i32)
}

/// Majority vote ignoring `IGNORE`; ties go to the lowest class id.
pub fn majority_label(labels: impl IntoIterator<Item = ClassId>) -> ClassId {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for l in labels.into_iter().filter(|l| !l.is_ignore()) {
        *counts.entry(l).or_default() += 1;
    }
    let mut best = (ClassId::IGNORE, 0);
    for (class, n) in counts {
        if n > best.1 {
            best = (class, n);
        }
    }
    best.0
}

pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::validation(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let mut keyed: Vec<(VoxelKey, u32)> = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::validation(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        keyed.push((cell_key(p.coords(), voxel_size), i as u32));
    }
    keyed.sort_unstable();

    let mut cells = Vec::new();
    for run in keyed.chunk_by(|a, b| a.0 == b.0) {
        let key = run[0].0;
        let point_indices: Vec<u32> = run.iter().map(|&(_, i)| i).collect();
        let n = point_indices.len() as f64;
        let mut centroid = [0.0; 3];
        let (mut isum, mut icount) = (0.0, 0usize);
        for &i in &point_indices {
            let p = &cloud.points[i as usize];
            for (c, v) in centroid.iter_mut().zip(p.coords()) {
                *c += v;
            }
            if let Some(r) = p.intensity {
                isum += r;
                icount += 1;
            }
        }
        for (axis, c) in centroid.iter_mut().enumerate() {
            let lo = key[axis] as f64 * voxel_size;
            // keep the mean inside the cell despite summation round-off
            *c = (*c / n).clamp(lo, (lo + voxel_size).next_down());
        }
        let label = majority_label(point_indices.iter().map(|&i| cloud.label(i as usize)));
        cells.push(VoxelCell {
            key,
            point_indices,
            label,
            centroid,
            mean_intensity: if icount > 0 { isum / icount as f64 } else { 0.0 },
        });
    }
    Ok(VoxelGrid { voxel_size, cells })
}

impl VoxelGrid {
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn cells(&self) -> &[VoxelCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = VoxelKey> + '_ {
        self.cells.iter().map(|c| c.key)
    }

    pub fn labels(&self) -> Vec<ClassId> {
        self.cells.iter().map(|c| c.label).collect()
    }

    pub fn find(&self, key: VoxelKey) -> Option<usize> {
        self.cells.binary_search_by(|c| c.key.cmp(&key)).ok()
    }

    /// Per-cell network input, row-major `len × 5`: centroid offset within the
    /// cell (three values in `[0, 1)`), mean intensity, and point count divided
    /// by `count_cap` (saturating at 1).
    pub fn input_features(&self, count_cap: usize) -> Vec<f64> {
        let cap = count_cap.max(1) as f64;
        let mut out = Vec::with_capacity(self.len() * INPUT_CHANNELS);
        for cell in &self.cells {
            for axis in 0..3 {
                let off = cell.centroid[axis] / self.voxel_size - cell.key[axis] as f64;
                out.push(off.clamp(0.0, 1.0f64.next_down()));
            }
            out.push(cell.mean_intensity);
            out.push((cell.point_indices.len() as f64 / cap).min(1.0));
        }
        out
    }
}

/// Broadcast per-cell predictions back to the points of the source cloud.
pub fn unvoxelize_predictions(
    grid: &VoxelGrid,
    per_cell: &[ClassId],
    cloud_len: usize,
) -> Result<Vec<ClassId>> {
    if per_cell.len() != grid.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} cells",
            per_cell.len(),
            grid.len()
        )));
    }
    let mut out = vec![ClassId::IGNORE; cloud_len];
    for (cell, &pred) in grid.cells.iter().zip(per_cell) {
        for &i in &cell.point_indices {
            let slot = out.get_mut(i as usize).ok_or_else(|| {
                Error::validation(format!("point index {i} exceeds cloud length {cloud_len}"))
            })?;
            *slot = pred;
        }
    }
    Ok(out)
}
