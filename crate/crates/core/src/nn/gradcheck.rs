//! Central-difference verification of the analytic gradients.

use super::graph::{Graph, Var};
use super::{Matrix, ParamSet};
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Knobs for [`grad_check_with`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, within `[1e-7, 1e-3]`.
    pub h: f64,
    /// Probe at most this many entries per tensor (all when `None`).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_per_tensor: None,
            seed: 0x5eed,
        }
    }
}

/// Max over all parameters and inputs of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, params: &ParamSet, inputs: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    grad_check_with(
        f,
        params,
        inputs,
        &GradCheckOptions {
            h,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, params: &ParamSet, inputs: &[Matrix], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::InvalidConfig(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.h)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Non-scalar outputs are reduced with a fixed random projection.
    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, &vars);
    let shape = g.value(out).shape();
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("forward output".into()));
    }
    let proj = Matrix::from_vec(
        shape.0,
        shape.1,
        (0..shape.0 * shape.1).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let grads = g.backward_with(out, proj.clone());

    let eval = |ps: &ParamSet, ins: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new(ps);
        let vars: Vec<Var> = ins.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        let v = g.value(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("perturbed forward output".into()));
        }
        Ok(v.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let probe = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.max_per_tensor {
            Some(m) if m < len => {
                let mut v = sample(rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };
    let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(1.0);

    let mut worst: f64 = 0.0;
    let mut ps = params.clone();
    for id in params.ids() {
        let zeros = Matrix::zeros(params.get(id).rows(), params.get(id).cols());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        for k in probe(analytic.data().len(), &mut rng) {
            let x0 = params.get(id).data()[k];
            ps.get_mut(id).data_mut()[k] = x0 + opts.h;
            let fp = eval(&ps, inputs)?;
            ps.get_mut(id).data_mut()[k] = x0 - opts.h;
            let fm = eval(&ps, inputs)?;
            ps.get_mut(id).data_mut()[k] = x0;
            worst = worst.max(rel(analytic.data()[k], (fp - fm) / (2.0 * opts.h)));
        }
    }
    let mut ins = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = Matrix::zeros(inputs[i].rows(), inputs[i].cols());
        let analytic = grads.wrt(*v).unwrap_or(&zeros).clone();
        for k in probe(analytic.data().len(), &mut rng) {
            let x0 = inputs[i].data()[k];
            ins[i].data_mut()[k] = x0 + opts.h;
            let fp = eval(params, &ins)?;
            ins[i].data_mut()[k] = x0 - opts.h;
            let fm = eval(params, &ins)?;
            ins[i].data_mut()[k] = x0;
            worst = worst.max(rel(analytic.data()[k], (fp - fm) / (2.0 * opts.h)));
        }
    }
    Ok(worst)
}
