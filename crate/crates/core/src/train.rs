//! Rate-distortion objective and the two-frame overfit loop.
//!
//! The training graph mirrors the codec on a pair (frame a coded intra,
//! frame b predicted from a). Quantization is replaced by additive uniform
//! noise, upsampling is teacher forced on the true child sets, and KNN
//! graphs are fixed up front, so the whole loss is differentiable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{coarsen, Coord, FramePointCloud, ParentMap};
use crate::entropy::{add_uniform_noise, quantize_matrix, EntropyLinks};
use crate::error::{Error, Result};
use crate::knn::{build_knn, KnnAdjacency};
use crate::model::Model;
use crate::nn::{Adam, Graph, Matrix, Var};
use crate::pipeline::build_contextual_decode;
use crate::scale::{child_links, occupancy_targets};

const BCE_EPS: f64 = 1e-7;

/// `R + lambda * D` where `D` averages the per-stage mean binary
/// cross-entropy (natural log) of the occupancy probabilities.
pub fn rd_loss(rate_bits: f64, probs: &[Vec<f64>], targets: &[Vec<f64>], lambda: f64) -> Result<f64> {
    Ok(rate_bits + lambda * distortion(probs, targets)?)
}

pub fn distortion(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} stages of probabilities, {} of targets", probs.len(), targets.len())));
    }
    let mut d = 0.0;
    for (p, o) in probs.iter().zip(targets) {
        if p.len() != o.len() || p.is_empty() {
            return Err(Error::ShapeMismatch("stage probabilities and targets differ".into()));
        }
        let s: f64 = p
            .iter()
            .zip(o)
            .map(|(&p, &o)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(o * p.ln() + (1.0 - o) * (1.0 - p).ln())
            })
            .sum();
        d += s / p.len() as f64;
    }
    Ok(d / probs.len() as f64)
}

/// Graph form over occupancy logits: returns `(loss, D)`.
pub fn build_rd_loss(g: &mut Graph, rate_bits: Var, stages: &[(Var, &[f64])], lambda: f64) -> (Var, Var) {
    let bces: Vec<Var> = stages.iter().map(|(l, t)| g.bce_logits(*l, t)).collect();
    let cat = g.concat_cols(&bces);
    let d = g.mean_all(cat);
    let ld = g.scale(d, lambda);
    (g.add(rate_bits, ld), d)
}

/// Fixed structure of one training frame.
#[derive(Clone, Debug)]
pub struct FrameTargets {
    /// Coordinates of stages 0..=4.
    pub coords: Vec<Vec<Coord>>,
    /// `pm[k]` groups stage `k` into stage `k + 1`.
    pub pm: Vec<ParentMap>,
    pub feats0: Matrix,
    /// `occ[k]`: occupancy of the candidates of stage `k + 1` parents.
    pub occ: Vec<Vec<f64>>,
    /// `links[k]`: parent row and octant of every stage-`k` point.
    pub links: Vec<(Vec<usize>, Vec<usize>)>,
    pub entropy: EntropyLinks,
}

impl FrameTargets {
    pub fn new(frame: &FramePointCloud) -> Result<Self> {
        if frame.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut coords = vec![frame.coords.clone()];
        for _ in 0..4 {
            let next = coarsen(coords.last().unwrap(), 1);
            coords.push(next);
        }
        let pm: Vec<ParentMap> = (0..4).map(|k| ParentMap::build(&coords[k])).collect();
        let occ = (0..3)
            .map(|k| occupancy_targets(&coords[k + 1], &coords[k]))
            .collect::<Result<Vec<_>>>()?;
        let links = (0..3).map(|k| child_links(&coords[k])).collect();
        let entropy = EntropyLinks::new(&coords[3], &coords[4])?;
        Ok(Self {
            coords,
            pm,
            feats0: frame.feats.clone(),
            occ,
            links,
            entropy,
        })
    }

    pub fn n_points(&self) -> usize {
        self.coords[0].len()
    }
}

/// An intra frame and a frame predicted from it.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub a: FrameTargets,
    pub b: FrameTargets,
    pub adj_fmt: KnnAdjacency,
    pub adj_ctr: KnnAdjacency,
}

impl TrainingPair {
    pub fn new(model: &Model, a: &FramePointCloud, b: &FramePointCloud) -> Result<Self> {
        let a = FrameTargets::new(a)?;
        let b = FrameTargets::new(b)?;
        let adj_fmt = build_knn(&b.coords[3], &a.coords[3], model.config.knn_k)?;
        let adj_ctr = build_knn(&b.coords[3], &a.coords[3], model.config.ctr_k)?;
        Ok(Self { a, b, adj_fmt, adj_ctr })
    }

    /// Quantization surrogates: `(y noise, z noise)` per frame.
    pub fn noise(&self, model: &Model, rng: &mut ChaCha8Rng) -> [(Matrix, Matrix); 2] {
        let d4 = model.config.feature_width[4];
        let cz = model.config.hyper_width;
        let mut one = |t: &FrameTargets| {
            let y = add_uniform_noise(&Matrix::zeros(t.entropy.n4, d4), rng);
            let z = add_uniform_noise(&Matrix::zeros(t.entropy.n5, cz), rng);
            (y, z)
        };
        [one(&self.a), one(&self.b)]
    }
}

/// Graph nodes of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub bits: Var,
    pub f3: Var,
    pub f4: Var,
    pub z: Var,
    pub aligned: Var,
    pub refined: Var,
    /// Occupancy logits of stages 3->2, 2->1, 1->0.
    pub logits: [Var; 3],
}

fn build_frame(
    model: &Model,
    g: &mut Graph,
    t: &FrameTargets,
    ctx: Var,
    reference: Option<(Var, &KnnAdjacency)>,
    noise: &(Matrix, Matrix),
) -> FrameVars {
    let mut f = g.constant(t.feats0.clone());
    for k in 0..3 {
        f = model.down[k].build(g, f, &t.pm[k]);
    }
    let f3 = f;
    let x = g.concat_cols(&[f3, ctx]);
    let f4 = model.ctx_enc.build(g, x, &t.pm[3]);
    let z = model.entropy.build_hyper(g, f4, &t.entropy);
    let zn = g.constant(noise.1.clone());
    let z_n = g.add(z, zn);
    let yn = g.constant(noise.0.clone());
    let y_n = g.add(f4, yn);
    let (mu, sigma) = model.entropy.build(g, y_n, z_n, ctx, &t.entropy);
    let lb = g.laplace_bits(y_n, mu, sigma);
    let lb = g.sum_all(lb);
    let fp = g.param(model.entropy.factorized);
    let zb = g.factorized_bits(z_n, fp);
    let zb = g.sum_all(zb);
    let bits = g.add(lb, zb);
    let aligned = build_contextual_decode(model, g, y_n, ctx, &t.coords[3], &t.pm[3].parent_of);
    let refined = match reference {
        None => aligned,
        Some((rf, adj)) => model.ctr.build(g, aligned, rf, adj).0,
    };
    let mut p = refined;
    let mut logits = [p; 3];
    for k in (0..3).rev() {
        logits[2 - k] = model.up[k].logits(g, p, &t.coords[k + 1]);
        if k > 0 {
            let (parent_of, oct) = &t.links[k];
            p = model.up[k].child_feats(g, p, parent_of, oct);
        }
    }
    FrameVars {
        bits,
        f3,
        f4,
        z,
        aligned,
        refined,
        logits,
    }
}

/// Loss terms of the pair.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub loss: Var,
    /// Bits per input point over both frames.
    pub rate: Var,
    /// Mean BCE over the six upsampling stages.
    pub bce: Var,
    pub aux: Var,
    pub a: FrameVars,
    pub b: FrameVars,
}

/// Weights of the feature-matching terms that tie decoded stage-3
/// features to the encoder's. The refined output is pulled harder so the
/// attention stage improves on the contextual decode instead of only
/// serving the occupancy heads.
pub const AUX_WEIGHT_ALIGNED: f64 = 1.0;
pub const AUX_WEIGHT_REFINED: f64 = 4.0;

pub fn build_pair_loss(
    model: &Model,
    g: &mut Graph,
    pair: &TrainingPair,
    noise: &[(Matrix, Matrix); 2],
    lambda: f64,
    mode_zero_context: bool,
) -> PairVars {
    let cw = model.config.context_width;
    let ctx_a = g.constant(Matrix::zeros(pair.a.coords[3].len(), cw));
    let a = build_frame(model, g, &pair.a, ctx_a, None, &noise[0]);
    let c3b = &pair.b.coords[3];
    let ctx_b = if mode_zero_context {
        g.constant(Matrix::zeros(c3b.len(), cw))
    } else {
        let cur = model.geo.build(g, c3b);
        let (al, _) = model.fmt.build(g, a.refined, &pair.adj_fmt, c3b);
        model.fuse.build_single(g, cur, al)
    };
    let b = build_frame(model, g, &pair.b, ctx_b, Some((a.refined, &pair.adj_ctr)), &noise[1]);
    let n = (pair.a.n_points() + pair.b.n_points()) as f64;
    let bits = g.add(a.bits, b.bits);
    let rate = g.scale(bits, 1.0 / n);
    let stages: Vec<(Var, &[f64])> = [(&a, &pair.a), (&b, &pair.b)]
        .iter()
        .flat_map(|(v, t)| (0..3).map(move |i| (v.logits[i], t.occ[2 - i].as_slice())))
        .collect();
    let (rd, bce) = build_rd_loss(g, rate, &stages, lambda);
    let mut aux_terms = Vec::new();
    for (v, target, w) in [
        (a.refined, a.f3, AUX_WEIGHT_REFINED),
        (b.aligned, b.f3, AUX_WEIGHT_ALIGNED),
        (b.refined, b.f3, AUX_WEIGHT_REFINED),
    ] {
        let t = g.value(target).clone();
        let m = g.mse(v, t);
        aux_terms.push(g.scale(m, w));
    }
    let aux = g.concat_cols(&aux_terms);
    let aux = g.sum_all(aux);
    let loss = g.add(rd, aux);
    PairVars {
        loss,
        rate,
        bce,
        aux,
        a,
        b,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Peak Adam step size; decays along a half cosine.
    pub learning_rate: f64,
    /// Step size at the last step, as a fraction of the peak.
    pub final_lr_fraction: f64,
    /// Fraction of steps run at [`WARMUP_LAMBDA`].
    pub warmup_fraction: f64,
}

pub const WARMUP_LAMBDA: f64 = 30.0;

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lambda: 15.0,
            seed: 7,
            learning_rate: 1e-2,
            final_lr_fraction: 0.05,
            warmup_fraction: 0.1,
        }
    }
}

impl TrainOptions {
    pub fn lr_at(&self, step: usize) -> f64 {
        let c = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / self.steps.max(1) as f64).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * c)
    }
}

/// Values of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerms {
    pub loss: f64,
    pub rate: f64,
    pub bce: f64,
    pub aux: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Running minimum of the training loss.
    pub trace: Vec<f64>,
    pub loss: Vec<f64>,
    pub bce: Vec<f64>,
    pub rate: Vec<f64>,
    /// Rounded (not noisy) evaluation before and after training.
    pub initial: PairTerms,
    pub final_terms: PairTerms,
}

fn terms(g: &Graph, v: &PairVars) -> PairTerms {
    let s = |x: Var| g.value(x).get(0, 0);
    PairTerms {
        loss: s(v.loss),
        rate: s(v.rate),
        bce: s(v.bce),
        aux: s(v.aux),
    }
}

/// Loss terms with true rounding in place of noise.
pub fn evaluate_pair(model: &Model, pair: &TrainingPair, lambda: f64) -> PairTerms {
    let d4 = model.config.feature_width[4];
    let cz = model.config.hyper_width;
    let zeros = |t: &FrameTargets| (Matrix::zeros(t.entropy.n4, d4), Matrix::zeros(t.entropy.n5, cz));
    let mut noise = [zeros(&pair.a), zeros(&pair.b)];
    // Frame a's latents do not depend on its noise; frame b's depend on a's.
    for _ in 0..3 {
        let mut g = Graph::new(&model.params);
        let v = build_pair_loss(model, &mut g, pair, &noise, lambda, false);
        for (i, fv) in [v.a, v.b].iter().enumerate() {
            let y = g.value(fv.f4);
            let z = g.value(fv.z);
            let dy = quantize_matrix(y).data().iter().zip(y.data()).map(|(q, v)| q - v).collect();
            let dz = quantize_matrix(z).data().iter().zip(z.data()).map(|(q, v)| q - v).collect();
            noise[i] = (Matrix::from_vec(y.rows(), y.cols(), dy), Matrix::from_vec(z.rows(), z.cols(), dz));
        }
    }
    let mut g = Graph::new(&model.params);
    let v = build_pair_loss(model, &mut g, pair, &noise, lambda, false);
    terms(&g, &v)
}

/// Adam on every weight of `model` for `opts.steps` steps on one pair.
pub fn train_overfit(model: &mut Model, a: &FramePointCloud, b: &FramePointCloud, opts: &TrainOptions) -> Result<TrainReport> {
    if opts.steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    if !(opts.learning_rate > 0.0) || !(0.0..=1.0).contains(&opts.final_lr_fraction) {
        return Err(Error::InvalidConfig("learning rate must be > 0 and the final fraction in [0, 1]".into()));
    }
    if !(opts.lambda >= 0.0) {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    let pair = TrainingPair::new(model, a, b)?;
    let initial = evaluate_pair(model, &pair, opts.lambda);
    let mut adam = Adam::new(&model.params, opts.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let warm = (opts.steps as f64 * opts.warmup_fraction).round() as usize;
    let mut report = TrainReport {
        trace: Vec::with_capacity(opts.steps),
        loss: Vec::with_capacity(opts.steps),
        bce: Vec::with_capacity(opts.steps),
        rate: Vec::with_capacity(opts.steps),
        initial,
        final_terms: initial,
    };
    for step in 0..opts.steps {
        let lambda = if step < warm { WARMUP_LAMBDA } else { opts.lambda };
        let noise = pair.noise(model, &mut rng);
        let grads = {
            let mut g = Graph::new(&model.params);
            let v = build_pair_loss(model, &mut g, &pair, &noise, lambda, false);
            let t = terms(&g, &v);
            if !t.loss.is_finite() {
                return Err(Error::TrainingDiverged(step));
            }
            report.loss.push(t.loss);
            report.bce.push(t.bce);
            report.rate.push(t.rate);
            let best = report.trace.last().map_or(t.loss, |&m: &f64| m.min(t.loss));
            report.trace.push(best);
            g.backward(v.loss).into_param_grads(&model.params)
        };
        if grads.iter().any(|m| !m.is_finite()) {
            return Err(Error::TrainingDiverged(step));
        }
        adam.lr = opts.lr_at(step);
        adam.step(&mut model.params, &grads);
    }
    report.final_terms = evaluate_pair(model, &pair, opts.lambda);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_cost_nothing() {
        let t = vec![vec![0.0, 1.0, 1.0, 0.0]];
        let p = vec![vec![BCE_EPS, 1.0 - BCE_EPS, 1.0, 0.0]];
        assert!(distortion(&p, &t).unwrap() < 1e-6);
    }

    #[test]
    fn half_probability_costs_ln2_per_stage() {
        let t = vec![vec![0.0, 1.0, 1.0], vec![1.0; 5]];
        let p = vec![vec![0.5; 3], vec![0.5; 5]];
        let d = distortion(&p, &t).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((rd_loss(2.0, &p, &t, 0.0).unwrap() - 2.0).abs() < 1e-15);
    }
}
