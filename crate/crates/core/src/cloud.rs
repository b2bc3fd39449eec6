//! Voxelized point clouds, scale levels and codec configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::morton;
use crate::nn::Matrix;

pub type Coord = [u32; 3];

/// Geometry of one frame: unique voxel coordinates in Morton order plus
/// per-point features (an occupancy count at stage 0).
#[derive(Clone, Debug, PartialEq)]
pub struct FramePointCloud {
    pub frame_index: u32,
    pub coords: Vec<Coord>,
    pub feats: Matrix,
}

impl FramePointCloud {
    /// Build from already-integer coordinates with unit occupancy.
    pub fn from_coords(frame_index: u32, mut coords: Vec<Coord>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        morton::sort(&mut coords);
        if let Some(w) = coords.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicatePoints(w[0]));
        }
        let n = coords.len();
        Ok(Self {
            frame_index,
            coords,
            feats: Matrix::filled(n, 1, 1.0),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn to_level(&self) -> ScaleLevel {
        ScaleLevel {
            stage: 0,
            coords: self.coords.clone(),
            feats: self.feats.clone(),
        }
    }
}

/// One pyramid level. Stage-k coordinates are stage-0 coordinates shifted
/// right by k.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleLevel {
    pub stage: u8,
    pub coords: Vec<Coord>,
    pub feats: Matrix,
}

impl ScaleLevel {
    pub fn new(stage: u8, coords: Vec<Coord>, feats: Matrix) -> Result<Self> {
        if coords.len() != feats.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} coords vs {} feature rows",
                coords.len(),
                feats.rows()
            )));
        }
        Ok(Self { stage, coords, feats })
    }

    pub fn scale(&self) -> u32 {
        1 << self.stage
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Quantize real points to the integer grid.
///
/// Components are rounded half away from zero and clamped into
/// `[0, 2^bit_depth)`. Duplicates merge and the merged count becomes the
/// single feature channel. Output is Morton sorted.
pub fn voxelize(points: &[[f64; 3]], bit_depth: u32) -> Result<FramePointCloud> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if bit_depth == 0 || bit_depth > morton::MAX_COORD_BITS {
        return Err(Error::InvalidConfig(format!("bit depth {bit_depth}")));
    }
    let max = ((1u64 << bit_depth) - 1) as f64;
    let mut keyed: Vec<(u64, Coord)> = Vec::with_capacity(points.len());
    for p in points {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("voxelize input".into()));
        }
        let c = [0, 1, 2].map(|a| p[a].round().clamp(0.0, max) as u32);
        keyed.push((morton::key(c), c));
    }
    keyed.sort_unstable_by_key(|e| e.0);
    let mut coords = Vec::with_capacity(keyed.len());
    let mut counts: Vec<f64> = Vec::with_capacity(keyed.len());
    for (k, c) in keyed {
        match coords.last() {
            Some(&last) if morton::key(last) == k => *counts.last_mut().unwrap() += 1.0,
            _ => {
                coords.push(c);
                counts.push(1.0);
            }
        }
    }
    let n = coords.len();
    Ok(FramePointCloud {
        frame_index: 0,
        coords,
        feats: Matrix::from_vec(n, 1, counts),
    })
}

/// Parent structure of a Morton-sorted unique coordinate set.
#[derive(Clone, Debug, PartialEq)]
pub struct ParentMap {
    pub parents: Vec<Coord>,
    /// Parent index of every child, in child order.
    pub parent_of: Vec<usize>,
    /// Child-occupancy mask of every parent; bit `o` is octant `o`.
    pub masks: Vec<u8>,
}

impl ParentMap {
    pub fn build(coords: &[Coord]) -> Self {
        let mut parents: Vec<Coord> = Vec::new();
        let mut parent_of = Vec::with_capacity(coords.len());
        let mut masks: Vec<u8> = Vec::new();
        for &c in coords {
            let p = [c[0] >> 1, c[1] >> 1, c[2] >> 1];
            if parents.last() != Some(&p) {
                parents.push(p);
                masks.push(0);
            }
            *masks.last_mut().unwrap() |= 1 << morton::octant(c);
            parent_of.push(parents.len() - 1);
        }
        Self {
            parents,
            parent_of,
            masks,
        }
    }

    /// 8-wide boolean mask matrix, one row per parent.
    pub fn mask_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.parents.len(), 8);
        for (i, &mask) in self.masks.iter().enumerate() {
            for o in 0..8 {
                if mask >> o & 1 == 1 {
                    m.set(i, o, 1.0);
                }
            }
        }
        m
    }
}

/// `unique(coords >> shift)` in Morton order.
pub fn coarsen(coords: &[Coord], shift: u32) -> Vec<Coord> {
    let mut out: Vec<Coord> = coords.iter().map(|c| c.map(|v| v >> shift)).collect();
    morton::sort(&mut out);
    out.dedup();
    out
}

/// Channel widths and hyperparameters of the codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub gof_size: usize,
    /// Neighbours per anchor for feature alignment.
    pub knn_k: usize,
    /// Neighbours per query for cross-attention refinement.
    pub ctr_k: usize,
    pub lambda: f64,
    pub bit_depth: u32,
    /// Channel width per stage 0..=4.
    pub feature_width: [usize; 5],
    pub context_width: usize,
    pub hyper_width: usize,
    /// Hidden width of every MLP as a multiple of its input width.
    pub hidden_factor: usize,
    /// Previously decoded points visible to the autoregressive prior.
    pub ar_window: usize,
    pub peak: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            gof_size: 16,
            knn_k: 32,
            ctr_k: 16,
            lambda: 15.0,
            bit_depth: 10,
            feature_width: [1, 16, 32, 64, 96],
            context_width: 64,
            hyper_width: 8,
            hidden_factor: 2,
            ar_window: 8,
            peak: 1023.0,
            seed: 7,
        }
    }
}

pub const LAMBDAS: [f64; 5] = [1.0, 3.0, 5.0, 8.0, 15.0];

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.gof_size < 2 || !self.gof_size.is_power_of_two() {
            return bad("gof_size must be a power of two >= 2");
        }
        if self.knn_k == 0 || self.ctr_k == 0 {
            return bad("knn_k and ctr_k must be >= 1");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be > 0");
        }
        if !(self.peak > 0.0) {
            return bad("peak must be > 0");
        }
        if self.bit_depth < 5 || self.bit_depth > morton::MAX_COORD_BITS {
            return bad("bit_depth must be in 5..=21");
        }
        if self.feature_width.iter().any(|&w| w == 0)
            || self.context_width == 0
            || self.hyper_width == 0
            || self.hidden_factor == 0
            || self.ar_window == 0
        {
            return bad("widths must be positive");
        }
        Ok(())
    }

    /// Hash of everything that determines the parameter layout.
    pub fn arch_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"pcdc-arch-v2");
        for v in [self.knn_k, self.ctr_k, self.context_width, self.hyper_width, self.hidden_factor, self.ar_window] {
            h.update((v as u64).to_le_bytes());
        }
        for w in self.feature_width {
            h.update((w as u64).to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    /// Index of `lambda` in [`LAMBDAS`], if it is one of the trained rate points.
    pub fn lambda_index(&self) -> Option<u8> {
        LAMBDAS.iter().position(|&l| l == self.lambda).map(|i| i as u8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_and_sorting() {
        let pc = voxelize(&[[0.4, 0.4, 0.4], [0.6, 0.6, 0.6]], 10).unwrap();
        assert_eq!(pc.coords, vec![[0, 0, 0], [1, 1, 1]]);
        assert_eq!(pc.feats.data(), &[1.0, 1.0]);
    }

    #[test]
    fn duplicates_merge_into_occupancy() {
        let pc = voxelize(&[[1.2, 0.0, 0.0], [0.8, 0.0, 0.0]], 10).unwrap();
        assert_eq!(pc.coords, vec![[1, 0, 0]]);
        assert_eq!(pc.feats.get(0, 0), 2.0);
    }

    #[test]
    fn eleven_bit_cloud_halved_fits_ten_bits() {
        let pts: Vec<[f64; 3]> = [[0.0, 0.0, 0.0], [2047.0, 2047.0, 2047.0], [1023.0, 2046.0, 17.0]]
            .iter()
            .map(|p| p.map(|v| v * 0.5))
            .collect();
        let pc = voxelize(&pts, 10).unwrap();
        assert!(pc.coords.iter().flatten().all(|&v| v <= 1023));
    }

    #[test]
    fn empty_input_errors() {
        assert!(matches!(voxelize(&[], 10), Err(Error::EmptyCloud)));
    }

    #[test]
    fn idempotent_on_integer_clouds() {
        let pts = [[3.0, 4.0, 5.0], [10.0, 0.0, 1.0], [7.0, 7.0, 7.0]];
        let once = voxelize(&pts, 10).unwrap();
        let again: Vec<[f64; 3]> = once.coords.iter().map(|c| c.map(|v| v as f64)).collect();
        assert_eq!(voxelize(&again, 10).unwrap(), once);
    }

    #[test]
    fn parent_map_masks() {
        let coords = vec![[0, 0, 0], [1, 1, 1], [2, 2, 2]];
        let pm = ParentMap::build(&coords);
        assert_eq!(pm.parents, vec![[0, 0, 0], [1, 1, 1]]);
        assert_eq!(pm.masks, vec![0b1000_0001, 0b0000_0001]);
        assert_eq!(pm.parent_of, vec![0, 0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::default().validate().is_ok());
        let c = CodecConfig { gof_size: 12, ..Default::default() };
        assert!(c.validate().is_err());
        let c = CodecConfig { lambda: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        assert_eq!(CodecConfig::default().lambda_index(), Some(4));
    }
}
