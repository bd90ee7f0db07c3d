//! Cell hierarchies and convolution rulebooks over sparse voxel sets.

use rustc_hash::FxHashMap;

use crate::voxel::VoxelKey;

/// The 27 offsets of a 3×3×3 kernel in lexicographic order.
pub const KERNEL_OFFSETS: [[i32; 3]; 27] = {
    let mut out = [[0; 3]; 27];
    let mut n = 0;
    while n < 27 {
        out[n] = [(n / 9) as i32 - 1, ((n / 3) % 3) as i32 - 1, (n % 3) as i32 - 1];
        n += 1;
    }
    out
};

/// Sorted, deduplicated cell set with a key → row lookup.
#[derive(Clone, Debug)]
pub struct CellSet {
    keys: Vec<VoxelKey>,
    index: FxHashMap<VoxelKey, u32>,
}

impl CellSet {
    pub fn new(mut keys: Vec<VoxelKey>) -> Self {
        keys.sort_unstable();
        keys.dedup();
        let index = keys.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        CellSet { keys, index }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn get(&self, key: VoxelKey) -> Option<u32> {
        self.index.get(&key).copied()
    }

    /// Parent cells `floor(key / 2)`.
    pub fn coarsen(&self) -> CellSet {
        CellSet::new(self.keys.iter().map(|k| k.map(|c| c.div_euclid(2))).collect())
    }
}

/// `(input row, output row)` pairs per kernel offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    /// Pointwise map of a set onto itself (a 1×1×1 convolution).
    pub fn identity(n: usize) -> Self {
        Rulebook {
            n_in: n,
            n_out: n,
            pairs: vec![(0..n as u32).map(|i| (i, i)).collect()],
        }
    }

    /// Stride-1 convolution whose output set equals its input set.
    pub fn submanifold(cells: &CellSet) -> Self {
        let mut pairs = vec![Vec::new(); KERNEL_OFFSETS.len()];
        for (o, key) in cells.keys().iter().enumerate() {
            for (k, d) in KERNEL_OFFSETS.iter().enumerate() {
                let nb = [key[0] + d[0], key[1] + d[1], key[2] + d[2]];
                if let Some(i) = cells.get(nb) {
                    pairs[k].push((i, o as u32));
                }
            }
        }
        Rulebook {
            n_in: cells.len(),
            n_out: cells.len(),
            pairs,
        }
    }

    /// Stride-2 convolution from `fine` onto `coarse = fine.coarsen()`;
    /// output cell `o` reads fine cells `2·o + d`.
    pub fn downsample(fine: &CellSet, coarse: &CellSet) -> Self {
        let mut pairs = vec![Vec::new(); KERNEL_OFFSETS.len()];
        for (o, key) in coarse.keys().iter().enumerate() {
            for (k, d) in KERNEL_OFFSETS.iter().enumerate() {
                let f = [2 * key[0] + d[0], 2 * key[1] + d[1], 2 * key[2] + d[2]];
                if let Some(i) = fine.get(f) {
                    pairs[k].push((i, o as u32));
                }
            }
        }
        Rulebook {
            n_in: fine.len(),
            n_out: coarse.len(),
            pairs,
        }
    }

    /// The adjoint connectivity: a transposed convolution back onto the input set.
    pub fn transposed(&self) -> Self {
        Rulebook {
            n_in: self.n_out,
            n_out: self.n_in,
            pairs: self
                .pairs
                .iter()
                .map(|p| p.iter().map(|&(i, o)| (o, i)).collect())
                .collect(),
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }
}

/// Cell sets for every encoder level, finest first, plus their rulebooks.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub levels: Vec<CellSet>,
    pub submanifold: Vec<Rulebook>,
    /// `down[l]` maps level `l` onto level `l + 1`.
    pub down: Vec<Rulebook>,
}

impl Hierarchy {
    pub fn build(keys: Vec<VoxelKey>, n_levels: usize) -> Self {
        let mut levels = vec![CellSet::new(keys)];
        for _ in 1..n_levels {
            let next = levels.last().unwrap().coarsen();
            levels.push(next);
        }
        let submanifold = levels.iter().map(Rulebook::submanifold).collect();
        let down = levels
            .windows(2)
            .map(|w| Rulebook::downsample(&w[0], &w[1]))
            .collect();
        Hierarchy {
            levels,
            submanifold,
            down,
        }
    }
}
