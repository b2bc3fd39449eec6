//! Conditional entropy model for the stage-4 latent and its hyper latent.
//!
//! Location and scale of a Laplace law are predicted per symbol from three
//! priors: the decoded hyper latent of the point's parent, the previous
//! `window` latent rows in Morton order, and the motion-aware context pooled
//! onto the point. The hyper latent itself uses a per-channel factorized
//! law. Both laws are turned into 16-bit tables with an escape symbol that
//! carries any value of `[-2^15, 2^15)` verbatim.

use rand::Rng;

use crate::cloud::{Coord, ParentMap};
use crate::error::{Error, Result};
use crate::morton;
use crate::nn::{Graph, Matrix, Mlp, ParamId, ParamSet, Var};
use crate::prob::{self, FACTORIZED_PARAMS, SIGMA_MIN};
use crate::rangecoder::{CdfTable, RangeDecoder, RangeEncoder};

/// Smallest and largest codable latent value.
pub const VALUE_MIN: i64 = -(1 << 15);
pub const VALUE_MAX: i64 = (1 << 15) - 1;
/// Half width of the factorized tables.
pub const HYPER_WINDOW: i64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceParams {
    pub mu: Matrix,
    pub sigma: Matrix,
}

impl LaplaceParams {
    pub fn checksum(&self) -> u64 {
        self.mu.checksum() ^ self.sigma.checksum().rotate_left(17)
    }
}

/// Quantized hyper latent, one row per stage-5 point.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperLatent {
    pub z_hat: Matrix,
}

/// Round half away from zero.
pub fn quantize(v: f64) -> i64 {
    v.round() as i64
}

/// Elementwise [`quantize`], clamped into the codable range.
pub fn quantize_matrix(m: &Matrix) -> Matrix {
    m.map(|v| (quantize(v).clamp(VALUE_MIN, VALUE_MAX)) as f64)
}

/// Training-time surrogate: `v + u` with `u ~ U(-1/2, 1/2)`.
pub fn add_uniform_noise(m: &Matrix, rng: &mut impl Rng) -> Matrix {
    let data = m.data().iter().map(|&v| v + rng.gen_range(-0.5..0.5)).collect();
    Matrix::from_vec(m.rows(), m.cols(), data)
}

/// Laplace code length in bits of integer symbols.
pub fn rate_estimate(symbols: &Matrix, params: &LaplaceParams) -> Result<f64> {
    if symbols.shape() != params.mu.shape() || symbols.shape() != params.sigma.shape() {
        return Err(Error::ShapeMismatch("symbols and Laplace parameters differ in shape".into()));
    }
    Ok((0..symbols.data().len())
        .map(|i| {
            let n = symbols.data()[i] as i64;
            -prob::laplace_pmf(n, params.mu.data()[i], params.sigma.data()[i]).log2()
        })
        .sum())
}

/// Factorized code length in bits of the hyper latent.
pub fn hyper_rate_estimate(z_hat: &Matrix, fparams: &Matrix) -> f64 {
    let c = z_hat.cols();
    (0..z_hat.data().len())
        .map(|i| -prob::factorized_mass(z_hat.data()[i], fparams.row(i % c)).max(prob::P_MIN).log2())
        .sum()
}

/// Coarser-level parents used by the priors.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyLinks {
    /// Stage-4 parent of every stage-3 point.
    pub parent3: Vec<usize>,
    pub n4: usize,
    /// Stage-5 parent of every stage-4 point.
    pub parent4: Vec<usize>,
    pub n5: usize,
}

impl EntropyLinks {
    pub fn new(c3: &[Coord], c4: &[Coord]) -> Result<Self> {
        if !morton::is_sorted_unique(c3) || !morton::is_sorted_unique(c4) {
            return Err(Error::ScanOrderError("latent coordinates must follow Morton order".into()));
        }
        let pm3 = ParentMap::build(c3);
        if pm3.parents != c4 {
            return Err(Error::ScanOrderError("stage-4 coordinates are not the parents of stage 3".into()));
        }
        let pm4 = ParentMap::build(c4);
        Ok(Self {
            parent3: pm3.parent_of,
            n4: c4.len(),
            n5: pm4.parents.len(),
            parent4: pm4.parent_of,
        })
    }
}

/// Hyper encoder/decoder, autoregressive, temporal and fusion networks.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyModel {
    pub hyper_enc: Mlp,
    pub hyper_dec: Mlp,
    pub ar: Mlp,
    pub temporal: Mlp,
    pub fusion: Mlp,
    /// `hyper_width x 12` factorized parameters.
    pub factorized: ParamId,
    pub window: usize,
    pub width: usize,
}

impl EntropyModel {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        ctx_width: usize,
        hyper_width: usize,
        window: usize,
        factor: usize,
        seed: u64,
    ) -> Self {
        let h = factor * width;
        let mut fp = Matrix::zeros(hyper_width, FACTORIZED_PARAMS);
        for r in 0..hyper_width {
            fp.row_mut(r).copy_from_slice(&prob::factorized_init_row());
        }
        Self {
            hyper_enc: Mlp::two_layer(ps, &format!("{name}.hyper_enc"), width, hyper_width, factor, seed),
            hyper_dec: Mlp::new(ps, &format!("{name}.hyper_dec"), &[hyper_width, h, width], seed),
            ar: Mlp::new(ps, &format!("{name}.ar"), &[window * width, h, width], seed),
            temporal: Mlp::two_layer(ps, &format!("{name}.temporal"), ctx_width, width, factor, seed),
            fusion: Mlp::new(ps, &format!("{name}.fusion"), &[3 * width, h, 2 * width], seed),
            factorized: ps.add(format!("{name}.factorized"), fp),
            window,
            width,
        }
    }

    pub fn hyper_width(&self) -> usize {
        self.hyper_enc.out_width()
    }

    /// Pooled hyper analysis of the latent, before quantization.
    pub fn build_hyper(&self, g: &mut Graph, y: Var, links: &EntropyLinks) -> Var {
        let h = self.hyper_enc.apply(g, y);
        g.pool_mean(h, &links.parent4, links.n5)
    }

    /// Indices of the causal window of each row, nearest first.
    pub fn ar_indices(&self, n: usize) -> Vec<Option<usize>> {
        (0..n)
            .flat_map(|i| (1..=self.window).map(move |j| i.checked_sub(j)))
            .collect()
    }

    /// Hyper-decoded and temporal rows, one per stage-4 point.
    pub fn build_side(&self, g: &mut Graph, z_hat: Var, ctx: Var, links: &EntropyLinks) -> (Var, Var) {
        let zp = g.gather_rows(z_hat, &links.parent4);
        let h = self.hyper_dec.apply(g, zp);
        let tc = g.pool_mean(ctx, &links.parent3, links.n4);
        let t = self.temporal.apply(g, tc);
        (h, t)
    }

    /// Batched prediction of `(mu, sigma)` for every latent row.
    pub fn build(&self, g: &mut Graph, y_hat: Var, z_hat: Var, ctx: Var, links: &EntropyLinks) -> (Var, Var) {
        let (h, t) = self.build_side(g, z_hat, ctx, links);
        let n = links.n4;
        let prev = g.gather_rows_padded(y_hat, self.ar_indices(n));
        let prev = g.reshape(prev, n, self.window * self.width);
        let a = self.ar.apply(g, prev);
        let x = g.concat_cols(&[h, a, t]);
        let out = self.fusion.apply(g, x);
        let mu = g.slice_cols(out, 0, self.width);
        let ls = g.slice_cols(out, self.width, 2 * self.width);
        let s = g.exp(ls);
        (mu, g.clamp_min(s, SIGMA_MIN))
    }

    /// Side rows without a tape.
    pub fn side_rows(&self, ps: &ParamSet, z_hat: &Matrix, ctx: &Matrix, links: &EntropyLinks) -> (Matrix, Matrix) {
        let mut g = Graph::new(ps);
        let z = g.constant(z_hat.clone());
        let c = g.constant(ctx.clone());
        let (h, t) = self.build_side(&mut g, z, c, links);
        (g.value(h).clone(), g.value(t).clone())
    }

    /// `(mu, sigma)` of one row from its side rows and causal window
    /// (nearest first, `None` past the scan start).
    pub fn predict_row(&self, ps: &ParamSet, hyper: &[f64], temporal: &[f64], prev: &[Option<&[f64]>]) -> (Vec<f64>, Vec<f64>) {
        let mut ar_in = vec![0.0; self.window * self.width];
        for (j, p) in prev.iter().enumerate().take(self.window) {
            if let Some(p) = p {
                ar_in[j * self.width..(j + 1) * self.width].copy_from_slice(p);
            }
        }
        let a = self.ar.eval_row(ps, &ar_in);
        let mut x = Vec::with_capacity(3 * self.width);
        x.extend_from_slice(hyper);
        x.extend_from_slice(&a);
        x.extend_from_slice(temporal);
        let out = self.fusion.eval_row(ps, &x);
        let mu = out[..self.width].to_vec();
        let sigma = out[self.width..].iter().map(|v| v.exp().max(SIGMA_MIN)).collect();
        (mu, sigma)
    }

    fn window_of<'m>(&self, y: &'m Matrix, i: usize) -> Vec<Option<&'m [f64]>> {
        (1..=self.window).map(|j| i.checked_sub(j).map(|r| y.row(r))).collect()
    }

    /// Code the integer latent row by row. Returns the stream, the
    /// parameters used and the estimated bits.
    pub fn encode_latent(&self, ps: &ParamSet, y_hat: &Matrix, hyper: &Matrix, temporal: &Matrix) -> (Vec<u8>, LaplaceParams, f64) {
        let (n, c) = y_hat.shape();
        let mut mu = Matrix::zeros(n, c);
        let mut sigma = Matrix::zeros(n, c);
        let mut enc = RangeEncoder::new();
        let mut bits = 0.0;
        for i in 0..n {
            let (m, s) = self.predict_row(ps, hyper.row(i), temporal.row(i), &self.window_of(y_hat, i));
            for k in 0..c {
                let v = y_hat.get(i, k) as i64;
                let t = LaplaceTable::new(m[k], s[k]);
                t.encode(&mut enc, v);
                bits -= prob::laplace_pmf(v, m[k], s[k]).log2();
            }
            mu.row_mut(i).copy_from_slice(&m);
            sigma.row_mut(i).copy_from_slice(&s);
        }
        (enc.finish(), LaplaceParams { mu, sigma }, bits)
    }

    /// Inverse of [`encode_latent`]; `base` locates the stream for errors.
    pub fn decode_latent(
        &self,
        ps: &ParamSet,
        bytes: &[u8],
        base: usize,
        hyper: &Matrix,
        temporal: &Matrix,
    ) -> Result<(Matrix, LaplaceParams)> {
        let (n, c) = (hyper.rows(), self.width);
        let mut y = Matrix::zeros(n, c);
        let mut mu = Matrix::zeros(n, c);
        let mut sigma = Matrix::zeros(n, c);
        let mut dec = RangeDecoder::new(bytes);
        for i in 0..n {
            let (m, s) = self.predict_row(ps, hyper.row(i), temporal.row(i), &self.window_of(&y, i));
            for k in 0..c {
                let t = LaplaceTable::new(m[k], s[k]);
                let v = t.decode(&mut dec).map_err(|e| rebase(e, base))?;
                y.set(i, k, v as f64);
            }
            mu.row_mut(i).copy_from_slice(&m);
            sigma.row_mut(i).copy_from_slice(&s);
        }
        check_consumed(&dec, bytes.len(), base)?;
        Ok((y, LaplaceParams { mu, sigma }))
    }

    pub fn encode_hyper(&self, ps: &ParamSet, z_hat: &Matrix) -> (Vec<u8>, f64) {
        let fp = ps.get(self.factorized);
        let tables = hyper_tables(fp);
        let mut enc = RangeEncoder::new();
        for r in 0..z_hat.rows() {
            for (k, t) in tables.iter().enumerate() {
                t.encode(&mut enc, z_hat.get(r, k) as i64);
            }
        }
        (enc.finish(), hyper_rate_estimate(z_hat, fp))
    }

    pub fn decode_hyper(&self, ps: &ParamSet, bytes: &[u8], base: usize, rows: usize) -> Result<Matrix> {
        let tables = hyper_tables(ps.get(self.factorized));
        let mut z = Matrix::zeros(rows, tables.len());
        let mut dec = RangeDecoder::new(bytes);
        for r in 0..rows {
            for (k, t) in tables.iter().enumerate() {
                let v = t.decode(&mut dec).map_err(|e| rebase(e, base))?;
                z.set(r, k, v as f64);
            }
        }
        check_consumed(&dec, bytes.len(), base)?;
        Ok(z)
    }
}

fn rebase(e: Error, base: usize) -> Error {
    match e {
        Error::DecodeError { offset, reason } => Error::decode(base + offset, reason),
        other => other,
    }
}

fn check_consumed(dec: &RangeDecoder, len: usize, base: usize) -> Result<()> {
    if dec.position() > len + 4 {
        return Err(Error::decode(base + len, "latent stream overrun"));
    }
    Ok(())
}

/// Batched `(mu, sigma)` for a known latent; equal to the row-wise scan.
pub fn predict_params(
    model: &EntropyModel,
    ps: &ParamSet,
    z_hat: &HyperLatent,
    causal_prev: &Matrix,
    context: &Matrix,
    links: &EntropyLinks,
) -> Result<LaplaceParams> {
    if causal_prev.rows() != links.n4 || z_hat.z_hat.rows() != links.n5 || context.rows() != links.parent3.len() {
        return Err(Error::ScanOrderError(format!(
            "latent rows {}, hyper rows {}, context rows {} do not match the coordinate set",
            causal_prev.rows(),
            z_hat.z_hat.rows(),
            context.rows()
        )));
    }
    let mut g = Graph::new(ps);
    let y = g.constant(causal_prev.clone());
    let z = g.constant(z_hat.z_hat.clone());
    let c = g.constant(context.clone());
    let (mu, sigma) = model.build(&mut g, y, z, c, links);
    Ok(LaplaceParams {
        mu: g.value(mu).clone(),
        sigma: g.value(sigma).clone(),
    })
}

/// A window of integers around `lo..=lo+span-1` plus an escape symbol.
#[derive(Clone, Debug)]
pub struct WindowTable {
    pub lo: i64,
    pub table: CdfTable,
}

impl WindowTable {
    fn span(&self) -> usize {
        self.table.len() - 1
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i64) {
        let v = v.clamp(VALUE_MIN, VALUE_MAX);
        let idx = v - self.lo;
        if idx >= 0 && (idx as usize) < self.span() {
            enc.encode(&self.table, idx as usize);
        } else {
            enc.encode(&self.table, self.span());
            let raw = (v - VALUE_MIN) as u32;
            enc.encode_freq((raw >> 8) * 256, 256);
            enc.encode_freq((raw & 0xff) * 256, 256);
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> Result<i64> {
        let s = dec.decode(&self.table)?;
        if s < self.span() {
            return Ok(self.lo + s as i64);
        }
        let hi = dec.decode_target()? >> 8;
        dec.consume(hi * 256, 256);
        let lo = dec.decode_target()? >> 8;
        dec.consume(lo * 256, 256);
        Ok(((hi << 8) | lo) as i64 + VALUE_MIN)
    }
}

/// Discretized Laplace table centred on `round(mu)`.
pub struct LaplaceTable;

impl LaplaceTable {
    /// Half width `clamp(ceil(16 sigma), 4, 128)`.
    pub fn half_width(sigma: f64) -> i64 {
        ((16.0 * sigma).ceil() as i64).clamp(4, 128)
    }

    #[allow(clippy::new_ret_no_self)]
    pub fn new(mu: f64, sigma: f64) -> WindowTable {
        let w = Self::half_width(sigma);
        let center = quantize(mu).clamp(VALUE_MIN + w, VALUE_MAX - w);
        window_table(center - w, 2 * w + 1, |n| prob::laplace_mass(n as f64, mu, sigma))
    }
}

fn window_table(lo: i64, span: i64, mass: impl Fn(i64) -> f64) -> WindowTable {
    let mut probs: Vec<f64> = (lo..lo + span).map(|n| mass(n).max(prob::P_MIN)).collect();
    let inside: f64 = probs.iter().sum();
    probs.push((1.0 - inside).max(prob::P_MIN));
    WindowTable {
        lo,
        table: CdfTable::from_probs(&probs),
    }
}

/// One factorized table per hyper channel over `[-64, 64]`.
pub fn hyper_tables(fparams: &Matrix) -> Vec<WindowTable> {
    (0..fparams.rows())
        .map(|r| {
            let row = fparams.row(r);
            window_table(-HYPER_WINDOW, 2 * HYPER_WINDOW + 1, |n| prob::factorized_mass(n as f64, row))
        })
        .collect()
}
