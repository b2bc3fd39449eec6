//! Vector cross-attention refinement of decoded features against decoded
//! reference frames.

use crate::cloud::ScaleLevel;
use crate::error::{Error, Result};
use crate::knn::{build_knn, KnnAdjacency};
use crate::nn::{Graph, LinearLayer, Matrix, Mlp, ParamSet, Var, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct CtrParams {
    pub q_proj: LinearLayer,
    pub k_proj: LinearLayer,
    pub v_proj: LinearLayer,
    /// Relative-position encoding, `3 -> C`.
    pub pos_mlp: Mlp,
    /// Per-channel attention logits, `C -> C`.
    pub attn_mlp: Mlp,
    /// Value reweighting `v * (1 + w(v))`; the last layer starts at zero.
    pub weight_enc: Mlp,
    pub neighborhood_k: usize,
}

impl CtrParams {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, factor: usize, k: usize, seed: u64) -> Self {
        let weight_enc = Mlp::two_layer(ps, &format!("{name}.omega"), width, width, factor, seed);
        let last = weight_enc.last();
        ps.set(last.weight, Matrix::zeros(last.out_width, last.in_width));
        ps.set(last.bias, Matrix::zeros(1, last.out_width));
        Self {
            q_proj: LinearLayer::new(ps, &format!("{name}.q"), width, width, seed),
            k_proj: LinearLayer::new(ps, &format!("{name}.k"), width, width, seed),
            v_proj: LinearLayer::new(ps, &format!("{name}.v"), width, width, seed),
            pos_mlp: Mlp::new(ps, &format!("{name}.delta"), &[3, width, width], seed),
            attn_mlp: Mlp::two_layer(ps, &format!("{name}.gamma"), width, width, factor, seed),
            weight_enc,
            neighborhood_k: k,
        }
    }

    pub fn width(&self) -> usize {
        self.q_proj.in_width
    }

    /// Graph of one refinement. Returns the output and the attention
    /// weights (`N*k x C`, softmax over each query's k rows per channel).
    pub fn build(&self, g: &mut Graph, query: Var, ref_feats: Var, adj: &KnnAdjacency) -> (Var, Var) {
        let k = adj.k;
        let q = self.q_proj.apply(g, query);
        let kk = self.k_proj.apply(g, ref_feats);
        let v = self.v_proj.apply(g, ref_feats);
        let w = self.weight_enc.apply(g, v);
        let w1 = g.add_const(w, 1.0);
        let v = g.mul(v, w1);
        let rep: Vec<usize> = (0..adj.anchor_count).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let qr = g.gather_rows(q, &rep);
        let idx = adj.flat_indices();
        let kg = g.gather_rows(kk, &idx);
        let vg = g.gather_rows(v, &idx);
        let off = g.constant(adj.offsets_matrix(1.0));
        let pos = self.pos_mlp.apply(g, off);
        let diff = g.sub(qr, kg);
        let e_in = g.add(diff, pos);
        let e = self.attn_mlp.apply(g, e_in);
        let a = g.segment_softmax(e, k);
        let weighted = g.mul(a, vg);
        let y = g.segment_sum(weighted, k);
        let res = g.add(query, y);
        (g.layer_norm(res, LAYER_NORM_EPS), a)
    }
}

fn check(query: &ScaleLevel, reference: &ScaleLevel, params: &CtrParams) -> Result<()> {
    for (what, l) in [("query", query), ("reference", reference)] {
        if l.feats.cols() != params.width() {
            return Err(Error::ShapeMismatch(format!(
                "{what} width {}, attention width {}",
                l.feats.cols(),
                params.width()
            )));
        }
    }
    Ok(())
}

/// Refine `query` features against one reference level.
pub fn ctr_refine(query: &ScaleLevel, reference: &ScaleLevel, params: &CtrParams, ps: &ParamSet) -> Result<Matrix> {
    Ok(ctr_refine_with_attention(query, reference, params, ps)?.0)
}

/// [`ctr_refine`] plus the `N*k x C` attention weights.
pub fn ctr_refine_with_attention(
    query: &ScaleLevel,
    reference: &ScaleLevel,
    params: &CtrParams,
    ps: &ParamSet,
) -> Result<(Matrix, Matrix)> {
    check(query, reference, params)?;
    let adj = build_knn(&query.coords, &reference.coords, params.neighborhood_k)?;
    let mut g = Graph::new(ps);
    let q = g.constant(query.feats.clone());
    let r = g.constant(reference.feats.clone());
    let (out, a) = params.build(&mut g, q, r, &adj);
    Ok((g.value(out).clone(), g.value(a).clone()))
}

/// Complementary gate between the forward and backward refinements.
#[derive(Clone, Debug, PartialEq)]
pub struct CtrGate {
    pub gate: LinearLayer,
}

impl CtrGate {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, seed: u64) -> Self {
        Self {
            gate: LinearLayer::new(ps, name, width, width, seed),
        }
    }

    /// `w * fwd + (1 - w) * bwd` with `w = sigmoid(gate(query))`.
    pub fn build(&self, g: &mut Graph, query: Var, fwd: Var, bwd: Var) -> Var {
        let gl = self.gate.apply(g, query);
        let w = g.sigmoid(gl);
        let wb = g.one_minus(w);
        let a = g.mul(w, fwd);
        let b = g.mul(wb, bwd);
        g.add(a, b)
    }
}

/// Refine against both references, or against the one that exists.
pub fn ctr_bidirectional(
    query: &ScaleLevel,
    fwd_ref: &ScaleLevel,
    bwd_ref: Option<&ScaleLevel>,
    params: &CtrParams,
    gate: &CtrGate,
    ps: &ParamSet,
) -> Result<Matrix> {
    let rf = ctr_refine(query, fwd_ref, params, ps)?;
    let Some(bwd_ref) = bwd_ref else {
        return Ok(rf);
    };
    let rb = ctr_refine(query, bwd_ref, params, ps)?;
    let mut g = Graph::new(ps);
    let q = g.constant(query.feats.clone());
    let f = g.constant(rf);
    let b = g.constant(rb);
    let out = gate.build(&mut g, q, f, b);
    Ok(g.value(out).clone())
}
