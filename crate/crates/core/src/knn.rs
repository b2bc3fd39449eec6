//! Exact k-nearest-neighbour adjacency between two voxel sets.

use std::collections::HashMap;

use crate::cloud::Coord;
use crate::error::{Error, Result};
use crate::morton;
use crate::nn::Matrix;
use crate::par;

/// Below this many references a full scan beats the grid.
const FULL_SCAN_BELOW: usize = 256;

/// Fixed `N x K` neighbour table with cached anchor-minus-neighbour offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnAdjacency {
    pub anchor_count: usize,
    pub k: usize,
    /// Row-major `N x K` indices into the reference coordinates.
    pub neighbor_idx: Vec<u32>,
    /// Row-major `N x K` offsets `anchor - neighbour` in voxel units.
    pub rel_offsets: Vec<[i32; 3]>,
}

impl KnnAdjacency {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.neighbor_idx[i * self.k..(i + 1) * self.k]
    }

    pub fn offsets(&self, i: usize) -> &[[i32; 3]] {
        &self.rel_offsets[i * self.k..(i + 1) * self.k]
    }

    /// Flattened neighbour indices as `usize`, row-major.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.neighbor_idx.iter().map(|&i| i as usize).collect()
    }

    /// `(N*K) x 3` matrix of offsets, each divided by `scale`.
    pub fn offsets_matrix(&self, scale: f64) -> Matrix {
        let data = self
            .rel_offsets
            .iter()
            .flat_map(|o| o.map(|v| v as f64 / scale))
            .collect();
        Matrix::from_vec(self.rel_offsets.len(), 3, data)
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u32| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        eat(self.anchor_count as u32);
        eat(self.k as u32);
        for &i in &self.neighbor_idx {
            eat(i);
        }
        h
    }
}

#[inline]
fn dist2(a: Coord, b: Coord) -> u64 {
    (0..3)
        .map(|i| {
            let d = a[i] as i64 - b[i] as i64;
            (d * d) as u64
        })
        .sum()
}

/// Candidate order: distance, then the neighbour's Morton key, then index.
type Cand = (u64, u64, u32);

struct Grid {
    cell: u32,
    cells: HashMap<[u32; 3], Vec<u32>>,
    lo: [u32; 3],
    hi: [u32; 3],
}

impl Grid {
    fn new(refs: &[Coord], k: usize) -> Self {
        let mut lo = [u32::MAX; 3];
        let mut hi = [0u32; 3];
        for c in refs {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        // Aim for about k points per occupied cell on a surface-like set.
        let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a] + 1) as f64).collect();
        let area = ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2];
        let cell = ((k as f64 * area / refs.len() as f64).sqrt().ceil() as u32).max(1);
        let mut cells: HashMap<[u32; 3], Vec<u32>> = HashMap::new();
        for (i, c) in refs.iter().enumerate() {
            cells.entry(c.map(|v| v / cell)).or_default().push(i as u32);
        }
        let lo = lo.map(|v| v / cell);
        let hi = hi.map(|v| v / cell);
        Self { cell, cells, lo, hi }
    }

    fn query(&self, refs: &[Coord], a: Coord, k: usize) -> Vec<Cand> {
        let ca = a.map(|v| v / self.cell);
        let reach = (0..3)
            .map(|i| {
                let c = ca[i] as i64;
                (c - self.lo[i] as i64).abs().max((self.hi[i] as i64 - c).abs())
            })
            .max()
            .unwrap_or(0);
        let mut cand: Vec<Cand> = Vec::new();
        for r in 0..=reach {
            self.visit_ring(ca, r, |idx| {
                for &j in idx {
                    let c = refs[j as usize];
                    cand.push((dist2(a, c), morton::key(c), j));
                }
            });
            if cand.len() >= k {
                cand.sort_unstable();
                cand.truncate(k);
                // Every unvisited point is at least r*cell+1 away on some axis.
                let bound = r as u64 * self.cell as u64 + 1;
                if cand[k - 1].0 < bound * bound {
                    break;
                }
            }
        }
        cand.sort_unstable();
        cand.truncate(k);
        cand
    }

    /// Visit the cells at Chebyshev distance exactly `r` from `c`.
    fn visit_ring(&self, c: [u32; 3], r: i64, mut f: impl FnMut(&[u32])) {
        let c = c.map(|v| v as i64);
        let mut look = |x: i64, y: i64, z: i64| {
            if x < 0 || y < 0 || z < 0 {
                return;
            }
            if let Some(v) = self.cells.get(&[x as u32, y as u32, z as u32]) {
                f(v);
            }
        };
        if r == 0 {
            look(c[0], c[1], c[2]);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                if dx.abs() == r || dy.abs() == r {
                    for dz in -r..=r {
                        look(c[0] + dx, c[1] + dy, c[2] + dz);
                    }
                } else {
                    look(c[0] + dx, c[1] + dy, c[2] - r);
                    look(c[0] + dx, c[1] + dy, c[2] + r);
                }
            }
        }
    }
}

fn full_scan(refs: &[Coord], a: Coord, k: usize) -> Vec<Cand> {
    let mut cand: Vec<Cand> = refs
        .iter()
        .enumerate()
        .map(|(j, &c)| (dist2(a, c), morton::key(c), j as u32))
        .collect();
    cand.sort_unstable();
    cand.truncate(k);
    cand
}

/// For every anchor, the `k` nearest references by Euclidean distance,
/// ties broken by the neighbour's Morton key. With fewer than `k`
/// references the farthest one is repeated to fill the row.
pub fn build_knn(anchors: &[Coord], refs: &[Coord], k: usize) -> Result<KnnAdjacency> {
    if refs.is_empty() {
        return Err(Error::EmptyReference);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let take = k.min(refs.len());
    let grid = (refs.len() >= FULL_SCAN_BELOW).then(|| Grid::new(refs, take));
    let rows: Vec<Vec<u32>> = par::map_slice(anchors, |&a| {
        let cand = match &grid {
            Some(g) => g.query(refs, a, take),
            None => full_scan(refs, a, take),
        };
        let mut row: Vec<u32> = cand.iter().map(|c| c.2).collect();
        let last = *row.last().expect("at least one reference");
        row.resize(k, last);
        row
    });
    let mut neighbor_idx = Vec::with_capacity(anchors.len() * k);
    let mut rel_offsets = Vec::with_capacity(anchors.len() * k);
    for (a, row) in anchors.iter().zip(rows) {
        for j in row {
            let c = refs[j as usize];
            rel_offsets.push([0, 1, 2].map(|i| a[i] as i32 - c[i] as i32));
            neighbor_idx.push(j);
        }
    }
    Ok(KnnAdjacency {
        anchor_count: anchors.len(),
        k,
        neighbor_idx,
        rel_offsets,
    })
}
