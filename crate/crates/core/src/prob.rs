//! Discretized probability laws used by the entropy model: a Laplace
//! density integrated over unit bins, and a per-channel monotone mixture of
//! sigmoids for the hyper latent.

/// Lower clamp on the Laplace scale.
pub const SIGMA_MIN: f64 = 0.11;
/// Probability floor; keeps every symbol codable with 16-bit tables.
pub const P_MIN: f64 = 1.0 / 65536.0;

#[inline]
fn density(t: f64, sigma: f64) -> f64 {
    (-t.abs() / sigma).exp() / (2.0 * sigma)
}

/// Mass of the bin `[x - 1/2, x + 1/2]` under Laplace(mu, sigma), unfloored.
pub fn laplace_mass(x: f64, mu: f64, sigma: f64) -> f64 {
    let lo = x - 0.5 - mu;
    let hi = x + 0.5 - mu;
    if lo >= 0.0 {
        0.5 * ((-lo / sigma).exp() - (-hi / sigma).exp())
    } else if hi < 0.0 {
        0.5 * ((hi / sigma).exp() - (lo / sigma).exp())
    } else {
        1.0 - 0.5 * (lo / sigma).exp() - 0.5 * (-hi / sigma).exp()
    }
}

/// Bin mass and its partial derivatives `(p, dp/dx, dp/dmu, dp/dsigma)`.
pub fn laplace_mass_grad(x: f64, mu: f64, sigma: f64) -> (f64, f64, f64, f64) {
    let p = laplace_mass(x, mu, sigma);
    let lo = x - 0.5 - mu;
    let hi = x + 0.5 - mu;
    let (fh, fl) = (density(hi, sigma), density(lo, sigma));
    let dx = fh - fl;
    let ds = -(hi * fh - lo * fl) / sigma;
    (p, dx, -dx, ds)
}

/// Probability of integer `n`, floored at [`P_MIN`].
pub fn laplace_pmf(n: i64, mu: f64, sigma: f64) -> f64 {
    laplace_mass(n as f64, mu, sigma).max(P_MIN)
}

/// Mixture components of the factorized hyper-latent model.
pub const FACTORIZED_UNITS: usize = 4;
/// Parameters per channel: mixture logits, locations, log scales.
pub const FACTORIZED_PARAMS: usize = 3 * FACTORIZED_UNITS;

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn mixture_weights(row: &[f64]) -> [f64; FACTORIZED_UNITS] {
    let logits = &row[..FACTORIZED_UNITS];
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = [0.0; FACTORIZED_UNITS];
    let mut s = 0.0;
    for u in 0..FACTORIZED_UNITS {
        w[u] = (logits[u] - m).exp();
        s += w[u];
    }
    w.map(|v| v / s)
}

/// Monotone cumulative `sum_u pi_u * sigmoid((x - b_u) / s_u)`.
pub fn factorized_cdf(x: f64, row: &[f64]) -> f64 {
    let pi = mixture_weights(row);
    (0..FACTORIZED_UNITS)
        .map(|u| {
            let s = row[2 * FACTORIZED_UNITS + u].exp();
            pi[u] * sigmoid((x - row[FACTORIZED_UNITS + u]) / s)
        })
        .sum()
}

pub fn factorized_mass(x: f64, row: &[f64]) -> f64 {
    factorized_mass_grad(x, row).0
}

/// Bin mass, `dp/dx` and `dp/dparams` for one channel.
pub fn factorized_mass_grad(x: f64, row: &[f64]) -> (f64, f64, [f64; FACTORIZED_PARAMS]) {
    let pi = mixture_weights(row);
    let mut diff = [0.0; FACTORIZED_UNITS];
    let mut p = 0.0;
    let mut dx = 0.0;
    let mut grad = [0.0; FACTORIZED_PARAMS];
    for u in 0..FACTORIZED_UNITS {
        let b = row[FACTORIZED_UNITS + u];
        let s = row[2 * FACTORIZED_UNITS + u].exp();
        let th = (x + 0.5 - b) / s;
        let tl = (x - 0.5 - b) / s;
        let (sh, sl) = (sigmoid(th), sigmoid(tl));
        let (dh, dl) = (sh * (1.0 - sh), sl * (1.0 - sl));
        diff[u] = sh - sl;
        p += pi[u] * diff[u];
        let dt = pi[u] * (dh - dl) / s;
        dx += dt;
        grad[FACTORIZED_UNITS + u] = -dt;
        grad[2 * FACTORIZED_UNITS + u] = -pi[u] * (dh * th - dl * tl);
    }
    for u in 0..FACTORIZED_UNITS {
        grad[u] = pi[u] * (diff[u] - p);
    }
    (p, dx, grad)
}

/// Default channel parameters: equal weights, spread locations, unit scales.
pub fn factorized_init_row() -> [f64; FACTORIZED_PARAMS] {
    let mut row = [0.0; FACTORIZED_PARAMS];
    for u in 0..FACTORIZED_UNITS {
        row[FACTORIZED_UNITS + u] = u as f64 - (FACTORIZED_UNITS as f64 - 1.0) / 2.0;
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplace_center_bin_closed_form() {
        let p = laplace_pmf(0, 0.0, 1.0);
        assert!((p - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((p - 0.39347).abs() < 1e-5);
    }

    #[test]
    fn laplace_symmetry() {
        for n in -5..=5 {
            for &(mu, s) in &[(0.3, 0.7), (-1.2, 2.5), (4.0, 0.11)] {
                let a = laplace_pmf(n, mu, s);
                let b = laplace_pmf(-n, -mu, s);
                assert!((a - b).abs() < 1e-15, "{n} {mu} {s}");
            }
        }
    }

    #[test]
    fn laplace_series_sums_to_one() {
        // Direct CDF differences, independent of the bin-mass branches.
        let cdf = |t: f64| if t < 0.0 { 0.5 * t.exp() } else { 1.0 - 0.5 * (-t).exp() };
        let oracle: f64 = (-30..=30).map(|n| cdf(n as f64 + 0.5) - cdf(n as f64 - 0.5)).sum();
        let total: f64 = (-30..=30).map(|n| laplace_pmf(n, 0.0, 1.0)).sum();
        assert!(oracle > 1.0 - 1e-12);
        assert!(total > 1.0 - 1e-12);
    }

    #[test]
    fn laplace_gradients_match_differences() {
        let h = 1e-6;
        for &(x, mu, s) in &[(0.0, 0.2, 0.8), (3.0, -0.4, 1.7), (-2.0, -2.3, 0.3)] {
            let (_, dx, dmu, ds) = laplace_mass_grad(x, mu, s);
            let nx = (laplace_mass(x + h, mu, s) - laplace_mass(x - h, mu, s)) / (2.0 * h);
            let nmu = (laplace_mass(x, mu + h, s) - laplace_mass(x, mu - h, s)) / (2.0 * h);
            let ns = (laplace_mass(x, mu, s + h) - laplace_mass(x, mu, s - h)) / (2.0 * h);
            assert!((dx - nx).abs() < 1e-7);
            assert!((dmu - nmu).abs() < 1e-7);
            assert!((ds - ns).abs() < 1e-7);
        }
    }

    #[test]
    fn factorized_cdf_is_monotone_in_unit_interval() {
        let mut row = factorized_init_row();
        row[0] = 0.7;
        row[9] = -0.4;
        let mut prev = 0.0;
        for i in -400..=400 {
            let c = factorized_cdf(i as f64 * 0.05, &row);
            assert!(c > 0.0 && c < 1.0);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn factorized_gradients_match_differences() {
        let mut row = factorized_init_row();
        row[1] = 0.3;
        row[6] = 0.9;
        row[10] = -0.2;
        let h = 1e-6;
        for &x in &[-2.0, 0.0, 1.3] {
            let (_, dx, g) = factorized_mass_grad(x, &row);
            let nx = (factorized_mass(x + h, &row) - factorized_mass(x - h, &row)) / (2.0 * h);
            assert!((dx - nx).abs() < 1e-7);
            for k in 0..FACTORIZED_PARAMS {
                let mut a = row;
                let mut b = row;
                a[k] += h;
                b[k] -= h;
                let n = (factorized_mass(x, &a) - factorized_mass(x, &b)) / (2.0 * h);
                assert!((g[k] - n).abs() < 1e-7, "param {k}: {} vs {n}", g[k]);
            }
        }
    }
}
