//! Feature-space motion alignment over a fixed KNN graph and the gated
//! fusion of forward and backward predictions into a motion-aware context.

use crate::cloud::{Coord, ScaleLevel};
use crate::error::{Error, Result};
use crate::knn::KnnAdjacency;
use crate::nn::{Graph, LinearLayer, Matrix, Mlp, ParamSet, Var};
use crate::scale::{neighbour_occupancy, NEIGHBOURS};

/// Predicted current-frame features from one reference.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures {
    pub anchor_count: usize,
    pub feats: Matrix,
}

/// Context rows plus the forward gate that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedContext {
    pub feats: Matrix,
    pub fwd_weight: Matrix,
}

/// Soft-mask and prediction networks, shared by both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct FmtParams {
    /// `C + 3 -> 1` logit per neighbour row.
    pub mask_mlp: Mlp,
    /// `C + 3 -> C` prediction from the pooled features and anchor position.
    pub pred_mlp: Mlp,
    /// Anchor coordinates are divided by this grid extent.
    pub extent: f64,
}

impl FmtParams {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, factor: usize, extent: f64, seed: u64) -> Self {
        Self {
            mask_mlp: Mlp::two_layer(ps, &format!("{name}.mask"), width + 3, 1, factor, seed),
            pred_mlp: Mlp::two_layer(ps, &format!("{name}.pred"), width + 3, width, factor, seed),
            extent,
        }
    }

    pub fn width(&self) -> usize {
        self.pred_mlp.out_width()
    }

    /// Graph of the alignment. Returns the aligned features (`N x C`) and
    /// the soft mask (`N*K x 1`, softmax over each anchor's K rows).
    pub fn build(&self, g: &mut Graph, ref_feats: Var, adj: &KnnAdjacency, anchors: &[Coord]) -> (Var, Var) {
        let gathered = g.gather_rows(ref_feats, &adj.flat_indices());
        let dx = g.constant(adj.offsets_matrix(1.0));
        let h = g.concat_cols(&[gathered, dx]);
        let logits = self.mask_mlp.apply(g, h);
        let alpha = g.segment_softmax(logits, adj.k);
        let modulated = g.mul_col_broadcast(gathered, alpha);
        let pooled = g.segment_sum(modulated, adj.k);
        let pos = g.constant(normalized_coords(anchors, self.extent));
        let z = g.concat_cols(&[pooled, pos]);
        (self.pred_mlp.apply(g, z), alpha)
    }
}

/// Coordinates divided by `extent`, one row per point.
pub fn normalized_coords(coords: &[Coord], extent: f64) -> Matrix {
    let data = coords.iter().flat_map(|c| c.map(|v| v as f64 / extent)).collect();
    Matrix::from_vec(coords.len(), 3, data)
}

pub(crate) fn check_adjacency(cur: &[Coord], refs: &[Coord], adj: &KnnAdjacency) -> Result<()> {
    if adj.anchor_count != cur.len() {
        return Err(Error::AdjacencyMismatch(format!(
            "{} anchors in adjacency, {} points in frame",
            adj.anchor_count,
            cur.len()
        )));
    }
    for i in 0..cur.len() {
        for (&j, off) in adj.row(i).iter().zip(adj.offsets(i)) {
            let r = refs.get(j as usize).ok_or_else(|| {
                Error::AdjacencyMismatch(format!("neighbour {j} outside a reference of {} points", refs.len()))
            })?;
            if (0..3).any(|a| cur[i][a] as i64 - r[a] as i64 != off[a] as i64) {
                return Err(Error::AdjacencyMismatch(format!("offset of anchor {i} is stale")));
            }
        }
    }
    Ok(())
}

fn check_width(level: &ScaleLevel, width: usize) -> Result<()> {
    if level.feats.cols() != width {
        return Err(Error::ShapeMismatch(format!(
            "reference features have width {}, expected {width}",
            level.feats.cols()
        )));
    }
    Ok(())
}

/// Predict features on `cur`'s coordinates from `reference`.
pub fn fmt_align(
    cur: &ScaleLevel,
    reference: &ScaleLevel,
    adj: &KnnAdjacency,
    params: &FmtParams,
    ps: &ParamSet,
) -> Result<AlignedFeatures> {
    Ok(fmt_align_with_mask(cur, reference, adj, params, ps)?.0)
}

/// [`fmt_align`] plus the `N x K` soft mask.
pub fn fmt_align_with_mask(
    cur: &ScaleLevel,
    reference: &ScaleLevel,
    adj: &KnnAdjacency,
    params: &FmtParams,
    ps: &ParamSet,
) -> Result<(AlignedFeatures, Matrix)> {
    check_adjacency(&cur.coords, &reference.coords, adj)?;
    check_width(reference, params.width())?;
    let mut g = Graph::new(ps);
    let rf = g.constant(reference.feats.clone());
    let (out, alpha) = params.build(&mut g, rf, adj, &cur.coords);
    let mask = Matrix::from_vec(adj.anchor_count, adj.k, g.value(alpha).data().to_vec());
    Ok((
        AlignedFeatures {
            anchor_count: cur.len(),
            feats: g.value(out).clone(),
        },
        mask,
    ))
}

/// Gate and context projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseParams {
    pub gate: LinearLayer,
    pub ctx: LinearLayer,
}

impl FuseParams {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, ctx_width: usize, seed: u64) -> Self {
        Self {
            gate: LinearLayer::new(ps, &format!("{name}.gate"), width, width, seed),
            ctx: LinearLayer::new(ps, &format!("{name}.ctx"), 2 * width, ctx_width, seed),
        }
    }

    /// `Linear_ctx(cur ++ fwd_term * bwd_term)`.
    pub fn build_terms(&self, g: &mut Graph, cur: Var, fwd_term: Var, bwd_term: Var) -> Var {
        let prod = g.mul(fwd_term, bwd_term);
        let fused = g.concat_cols(&[cur, prod]);
        self.ctx.apply(g, fused)
    }

    /// Returns the context and the forward gate.
    pub fn build_bi(&self, g: &mut Graph, cur: Var, fwd: Var, bwd: Var) -> (Var, Var) {
        let gl = self.gate.apply(g, cur);
        let wf = g.sigmoid(gl);
        let wb = g.one_minus(wf);
        let a = g.mul(wf, fwd);
        let b = g.mul(wb, bwd);
        (self.build_terms(g, cur, a, b), wf)
    }

    /// Gate bypassed and the backward factor replaced by ones.
    pub fn build_single(&self, g: &mut Graph, cur: Var, fwd: Var) -> Var {
        let fused = g.concat_cols(&[cur, fwd]);
        self.ctx.apply(g, fused)
    }
}

fn check_rows(n: usize, parts: &[(&str, &Matrix)]) -> Result<()> {
    for (what, m) in parts {
        if m.rows() != n {
            return Err(Error::ShapeMismatch(format!("{what} has {} rows, expected {n}", m.rows())));
        }
    }
    Ok(())
}

/// Fuse forward and backward predictions with complementary gates.
pub fn bi_fuse(
    cur_feats: &Matrix,
    fwd: &AlignedFeatures,
    bwd: &AlignedFeatures,
    params: &FuseParams,
    ps: &ParamSet,
) -> Result<FusedContext> {
    check_rows(cur_feats.rows(), &[("forward", &fwd.feats), ("backward", &bwd.feats)])?;
    let mut g = Graph::new(ps);
    let c = g.constant(cur_feats.clone());
    let f = g.constant(fwd.feats.clone());
    let b = g.constant(bwd.feats.clone());
    let (ctx, wf) = params.build_bi(&mut g, c, f, b);
    Ok(FusedContext {
        feats: g.value(ctx).clone(),
        fwd_weight: g.value(wf).clone(),
    })
}

/// `Linear_ctx(cur ++ fwd_term * bwd_term)` evaluated directly.
pub fn fuse_terms(cur_feats: &Matrix, fwd_term: &Matrix, bwd_term: &Matrix, params: &FuseParams, ps: &ParamSet) -> Result<Matrix> {
    check_rows(cur_feats.rows(), &[("forward", fwd_term), ("backward", bwd_term)])?;
    let mut g = Graph::new(ps);
    let c = g.constant(cur_feats.clone());
    let f = g.constant(fwd_term.clone());
    let b = g.constant(bwd_term.clone());
    let out = params.build_terms(&mut g, c, f, b);
    Ok(g.value(out).clone())
}

/// Context from a single past reference (P-frames).
pub fn single_ref_context(
    cur_feats: &Matrix,
    cur: &ScaleLevel,
    reference: &ScaleLevel,
    adj: &KnnAdjacency,
    fmt: &FmtParams,
    fuse: &FuseParams,
    ps: &ParamSet,
) -> Result<FusedContext> {
    let aligned = fmt_align(cur, reference, adj, fmt, ps)?;
    check_rows(cur_feats.rows(), &[("aligned", &aligned.feats)])?;
    let mut g = Graph::new(ps);
    let c = g.constant(cur_feats.clone());
    let f = g.constant(aligned.feats);
    let ctx = fuse.build_single(&mut g, c, f);
    let (n, w) = (cur_feats.rows(), fmt.width());
    Ok(FusedContext {
        feats: g.value(ctx).clone(),
        fwd_weight: Matrix::filled(n, w, 1.0),
    })
}

/// Decoder-reproducible descriptor of a frame's own geometry: occupancy of
/// the 26 neighbouring voxels plus the normalized position. Coordinates
/// must be Morton sorted.
pub fn geometry_descriptor(coords: &[Coord], extent: f64) -> Matrix {
    let nb = neighbour_occupancy(coords);
    let mut m = Matrix::zeros(coords.len(), NEIGHBOURS + 3);
    for (r, c) in coords.iter().enumerate() {
        let row = m.row_mut(r);
        row[..NEIGHBOURS].copy_from_slice(nb.row(r));
        for a in 0..3 {
            row[NEIGHBOURS + a] = c[a] as f64 / extent;
        }
    }
    m
}

/// Embedding of [`geometry_descriptor`] that stands in for the current
/// frame's features wherever the decoder must reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoEmbed {
    pub lin: LinearLayer,
    pub extent: f64,
}

impl GeoEmbed {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, extent: f64, seed: u64) -> Self {
        Self {
            lin: LinearLayer::new(ps, name, NEIGHBOURS + 3, width, seed),
            extent,
        }
    }

    pub fn build(&self, g: &mut Graph, coords: &[Coord]) -> Var {
        let d = g.constant(geometry_descriptor(coords, self.extent));
        let y = self.lin.apply(g, d);
        g.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::build_knn;

    fn zero_mlp(ps: &mut ParamSet, mlp: &Mlp) {
        for l in &mlp.layers {
            ps.set(l.weight, Matrix::zeros(l.out_width, l.in_width));
            ps.set(l.bias, Matrix::zeros(1, l.out_width));
        }
    }

    #[test]
    fn uniform_mask_gives_mean_of_neighbours() {
        let mut ps = ParamSet::new();
        let p = FmtParams::new(&mut ps, "fmt", 2, 2, 8.0, 1);
        zero_mlp(&mut ps, &p.mask_mlp);
        let cur = ScaleLevel::new(3, vec![[1, 1, 1]], Matrix::zeros(1, 2)).unwrap();
        let refs = vec![[0, 0, 0], [2, 2, 2], [5, 5, 5]];
        let rl = ScaleLevel::new(3, refs.clone(), Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![9.0, 9.0]])).unwrap();
        let adj = build_knn(&cur.coords, &refs, 2).unwrap();
        let (_, mask) = fmt_align_with_mask(&cur, &rl, &adj, &p, &ps).unwrap();
        assert_eq!(mask.data(), &[0.5, 0.5]);
    }

    #[test]
    fn stale_adjacency_is_rejected() {
        let mut ps = ParamSet::new();
        let p = FmtParams::new(&mut ps, "fmt", 2, 2, 8.0, 1);
        let cur = ScaleLevel::new(3, vec![[1, 1, 1]], Matrix::zeros(1, 2)).unwrap();
        let other = ScaleLevel::new(3, vec![[2, 1, 1]], Matrix::zeros(1, 2)).unwrap();
        let rl = ScaleLevel::new(3, vec![[0, 0, 0]], Matrix::zeros(1, 2)).unwrap();
        let adj = build_knn(&other.coords, &rl.coords, 1).unwrap();
        assert!(matches!(fmt_align(&cur, &rl, &adj, &p, &ps), Err(Error::AdjacencyMismatch(_))));
    }

    #[test]
    fn zero_gate_is_one_half() {
        let mut ps = ParamSet::new();
        let f = FuseParams::new(&mut ps, "fuse", 3, 4, 2);
        ps.set(f.gate.weight, Matrix::zeros(3, 3));
        ps.set(f.gate.bias, Matrix::zeros(1, 3));
        let cur = Matrix::filled(2, 3, 0.7);
        let a = AlignedFeatures { anchor_count: 2, feats: Matrix::filled(2, 3, 1.0) };
        let out = bi_fuse(&cur, &a, &a, &f, &ps).unwrap();
        assert!(out.fwd_weight.data().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn descriptor_counts_face_neighbours() {
        let d = geometry_descriptor(&[[1, 1, 1], [1, 1, 2], [4, 4, 4]], 8.0);
        assert_eq!(d.row(0)[..26].iter().sum::<f64>(), 1.0);
        assert_eq!(d.row(2)[..26].iter().sum::<f64>(), 0.0);
        assert_eq!(d.get(2, 26), 0.5);
    }
}
