//! Octant pooling down blocks and child-occupancy up blocks.

use crate::cloud::{Coord, ParentMap, ScaleLevel};
use crate::error::{Error, Result};
use crate::morton;
use crate::nn::{Graph, LinearLayer, Matrix, Mlp, ParamSet, Var, LAYER_NORM_EPS};

/// `out = act(Linear(mean of child features ++ child mask))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DownBlock {
    pub lin: LinearLayer,
    pub relu: bool,
    pub norm: bool,
}

impl DownBlock {
    pub fn new(ps: &mut ParamSet, name: &str, in_width: usize, out_width: usize, relu: bool, norm: bool, seed: u64) -> Self {
        Self {
            lin: LinearLayer::new(ps, name, in_width + 8, out_width, seed),
            relu,
            norm,
        }
    }

    pub fn in_width(&self) -> usize {
        self.lin.in_width - 8
    }

    pub fn build(&self, g: &mut Graph, feats: Var, pm: &ParentMap) -> Var {
        let pooled = g.pool_mean(feats, &pm.parent_of, pm.parents.len());
        let mask = g.constant(pm.mask_matrix());
        let x = g.concat_cols(&[pooled, mask]);
        let mut y = self.lin.apply(g, x);
        if self.relu {
            y = g.relu(y);
        }
        if self.norm {
            y = g.layer_norm(y, LAYER_NORM_EPS);
        }
        y
    }
}

fn check_level(level: &ScaleLevel) -> Result<()> {
    if level.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !morton::is_sorted_unique(&level.coords) {
        return Err(Error::ScanOrderError("level coordinates must be unique and Morton sorted".into()));
    }
    Ok(())
}

/// Halve the resolution of `level`.
pub fn downsample(level: &ScaleLevel, block: &DownBlock, ps: &ParamSet) -> Result<ScaleLevel> {
    check_level(level)?;
    if level.feats.cols() != block.in_width() {
        return Err(Error::ShapeMismatch(format!(
            "down block expects width {}, level has {}",
            block.in_width(),
            level.feats.cols()
        )));
    }
    let pm = ParentMap::build(&level.coords);
    let mut g = Graph::new(ps);
    let x = g.constant(level.feats.clone());
    let y = block.build(&mut g, x, &pm);
    ScaleLevel::new(level.stage + 1, pm.parents, g.value(y).clone())
}

/// Width of [`neighbour_occupancy`].
pub const NEIGHBOURS: usize = 26;

/// `N x 26` indicator of which of the 26 surrounding cells of each point
/// are occupied at the same level. Coordinates must be Morton sorted.
pub fn neighbour_occupancy(coords: &[Coord]) -> Matrix {
    let keys: Vec<u64> = coords.iter().map(|&c| morton::key(c)).collect();
    let mut m = Matrix::zeros(coords.len(), NEIGHBOURS);
    for (r, c) in coords.iter().enumerate() {
        let mut col = 0;
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let q = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    let key = q
                        .iter()
                        .all(|&v| v >= 0 && v <= u32::MAX as i64)
                        .then(|| morton::morton_key([q[0] as u32, q[1] as u32, q[2] as u32]).ok())
                        .flatten();
                    if key.is_some_and(|k| keys.binary_search(&k).is_ok()) {
                        m.set(r, col, 1.0);
                    }
                    col += 1;
                }
            }
        }
    }
    m
}

/// Child-occupancy logits plus a feature map for the kept children.
#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock {
    pub occ: Mlp,
    pub child: LinearLayer,
}

/// Output of [`upsample`].
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampled {
    pub level: ScaleLevel,
    /// Occupancy probability of each kept child.
    pub probs: Vec<f64>,
    /// Logits of all `8 N` candidates, one row per parent.
    pub logits: Matrix,
}

fn one_hot(octants: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(octants.len(), 8);
    for (r, &o) in octants.iter().enumerate() {
        m.set(r, o, 1.0);
    }
    m
}

impl UpBlock {
    pub fn new(ps: &mut ParamSet, name: &str, in_width: usize, out_width: usize, factor: usize, seed: u64) -> Self {
        Self {
            occ: Mlp::two_layer(ps, &format!("{name}.occ"), in_width + NEIGHBOURS, 8, factor, seed),
            child: LinearLayer::new(ps, &format!("{name}.child"), in_width + 8, out_width, seed),
        }
    }

    pub fn in_width(&self) -> usize {
        self.occ.in_width() - NEIGHBOURS
    }

    /// `N x 8` logits from the parent features and the parents' own
    /// neighbourhood; column `o` is octant `o`.
    pub fn logits(&self, g: &mut Graph, parent: Var, coords: &[Coord]) -> Var {
        let nb = g.constant(neighbour_occupancy(coords));
        let x = g.concat_cols(&[parent, nb]);
        self.occ.apply(g, x)
    }

    /// Features of children given by parent row and octant.
    pub fn child_feats(&self, g: &mut Graph, parent: Var, parent_idx: &[usize], octants: &[usize]) -> Var {
        let gathered = g.gather_rows(parent, parent_idx);
        let oh = g.constant(one_hot(octants));
        let x = g.concat_cols(&[gathered, oh]);
        let y = self.child.apply(g, x);
        g.relu(y)
    }
}

/// Keep the `target_count` most likely children, ties broken by Morton key.
/// Returns `(parent index, octant)` pairs in Morton order of the child.
pub fn select_children(coords: &[Coord], logits: &Matrix, target_count: usize) -> Result<Vec<(usize, usize)>> {
    let available = 8 * coords.len();
    if target_count > available {
        return Err(Error::InsufficientCandidates {
            requested: target_count,
            available,
        });
    }
    if target_count == 0 {
        return Err(Error::InvalidConfig("target count must be >= 1".into()));
    }
    // Parents are Morton sorted, so candidate index p*8+o is Morton order.
    let mut cand: Vec<usize> = (0..available).collect();
    cand.sort_by(|&a, &b| {
        let (la, lb) = (logits.data()[a], logits.data()[b]);
        lb.total_cmp(&la).then(a.cmp(&b))
    });
    let mut kept = cand[..target_count].to_vec();
    kept.sort_unstable();
    Ok(kept.into_iter().map(|c| (c / 8, c % 8)).collect())
}

/// Double the resolution of `level`, keeping `target_count` children.
pub fn upsample(level: &ScaleLevel, target_count: usize, block: &UpBlock, ps: &ParamSet) -> Result<Upsampled> {
    check_level(level)?;
    if level.stage == 0 {
        return Err(Error::InvalidConfig("cannot upsample stage 0".into()));
    }
    if level.feats.cols() != block.in_width() {
        return Err(Error::ShapeMismatch(format!(
            "up block expects width {}, level has {}",
            block.in_width(),
            level.feats.cols()
        )));
    }
    let mut g = Graph::new(ps);
    let x = g.constant(level.feats.clone());
    let lv = block.logits(&mut g, x, &level.coords);
    let logits = g.value(lv).clone();
    let kept = select_children(&level.coords, &logits, target_count)?;
    let parent_idx: Vec<usize> = kept.iter().map(|k| k.0).collect();
    let octants: Vec<usize> = kept.iter().map(|k| k.1).collect();
    let fv = block.child_feats(&mut g, x, &parent_idx, &octants);
    let coords = kept.iter().map(|&(p, o)| morton::child(level.coords[p], o)).collect();
    let probs = kept
        .iter()
        .map(|&(p, o)| 1.0 / (1.0 + (-logits.get(p, o)).exp()))
        .collect();
    Ok(Upsampled {
        level: ScaleLevel::new(level.stage - 1, coords, g.value(fv).clone())?,
        probs,
        logits,
    })
}

/// 0/1 ground-truth occupancy of all `8 N` candidates of `parents`, given
/// the true child set. Row-major, matching the logits layout.
pub fn occupancy_targets(parents: &[Coord], children: &[Coord]) -> Result<Vec<f64>> {
    let pm = ParentMap::build(children);
    if pm.parents != parents {
        return Err(Error::ShapeMismatch("children do not refine the parent set".into()));
    }
    let mut t = vec![0.0; parents.len() * 8];
    for (p, &m) in pm.masks.iter().enumerate() {
        for o in 0..8 {
            t[p * 8 + o] = (m >> o & 1) as f64;
        }
    }
    Ok(t)
}

/// Parent row and octant of every child, for teacher-forced feature maps.
pub fn child_links(children: &[Coord]) -> (Vec<usize>, Vec<usize>) {
    let pm = ParentMap::build(children);
    (pm.parent_of, children.iter().map(|&c| morton::octant(c)).collect())
}
