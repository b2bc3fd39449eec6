//! Synthetic dynamic sequences: a voxelized ellipsoid shell under a rigid
//! shift plus a sinusoidal shear.

use crate::cloud::{Coord, FramePointCloud};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub frames: usize,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Rigid motion per frame.
    pub shift: [f64; 3],
    /// Amplitude of the x displacement `A sin(2 pi (z / period + t / cycle))`.
    pub warp_amplitude: f64,
    pub warp_period: f64,
    pub warp_cycle: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            frames: 16,
            center: [512.0, 512.0, 512.0],
            semi_axes: [26.0, 9.0, 7.0],
            shift: [1.5, 0.5, 0.0],
            warp_amplitude: 1.5,
            warp_period: 24.0,
            warp_cycle: 16.0,
        }
    }
}

impl SynthOptions {
    /// Two frames, the second shifted by whole voxels.
    pub fn rigid_pair() -> Self {
        Self {
            frames: 2,
            shift: [3.0, 1.0, 0.0],
            warp_amplitude: 0.0,
            ..Self::default()
        }
    }

    fn source(&self, p: [f64; 3], t: f64) -> [f64; 3] {
        let tau = std::f64::consts::TAU;
        let w = self.warp_amplitude * (tau * (p[2] / self.warp_period + t / self.warp_cycle)).sin();
        [p[0] - self.shift[0] * t - w, p[1] - self.shift[1] * t, p[2] - self.shift[2] * t]
    }

    fn inside(&self, p: [f64; 3], t: f64) -> bool {
        let s = self.source(p, t);
        (0..3)
            .map(|a| ((s[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Voxels inside the warped ellipsoid with a 6-neighbour outside.
    pub fn frame(&self, t: usize) -> Result<FramePointCloud> {
        let tf = t as f64;
        let reach = self.semi_axes.iter().cloned().fold(0.0, f64::max)
            + self.warp_amplitude.abs()
            + 2.0;
        let lo: Vec<i64> = (0..3)
            .map(|a| (self.center[a] + self.shift[a] * tf - reach).floor().max(0.0) as i64)
            .collect();
        let hi: Vec<i64> = (0..3)
            .map(|a| (self.center[a] + self.shift[a] * tf + reach).ceil() as i64)
            .collect();
        let mut coords: Vec<Coord> = Vec::new();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let p = [x as f64, y as f64, z as f64];
                    if !self.inside(p, tf) {
                        continue;
                    }
                    let boundary = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].iter().any(|d| {
                        [1.0, -1.0].iter().any(|s| {
                            let q = [p[0] + s * d[0], p[1] + s * d[1], p[2] + s * d[2]];
                            !self.inside(q, tf)
                        })
                    });
                    if boundary {
                        coords.push([x as u32, y as u32, z as u32]);
                    }
                }
            }
        }
        FramePointCloud::from_coords(t as u32, coords)
    }

    pub fn sequence(&self) -> Result<Vec<FramePointCloud>> {
        (0..self.frames).map(|t| self.frame(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frame_has_about_two_thousand_points() {
        let f = SynthOptions::default().frame(0).unwrap();
        assert!((1200..3500).contains(&f.len()), "{}", f.len());
    }

    #[test]
    fn rigid_pair_is_an_exact_translation() {
        let o = SynthOptions::rigid_pair();
        let a = o.frame(0).unwrap();
        let b = o.frame(1).unwrap();
        let mut moved: Vec<Coord> = a.coords.iter().map(|c| [c[0] + 3, c[1] + 1, c[2]]).collect();
        crate::morton::sort(&mut moved);
        assert_eq!(moved, b.coords);
    }
}
