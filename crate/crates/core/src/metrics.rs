//! Geometry distortion (D1 point-to-point, D2 point-to-plane) and the
//! Bjontegaard delta rate.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::cloud::Coord;
use crate::error::{Error, Result};
use crate::knn::build_knn;
use crate::par;

/// Neighbours used for normal estimation.
pub const NORMAL_NEIGHBORS: usize = 12;

/// PSNR for an MSE; `+inf` marks a lossless reconstruction.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (3.0 * peak * peak / mse).log10()
    }
}

/// `"lossless"` for the infinite sentinel, otherwise the value in dB.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "lossless".to_string()
    } else {
        format!("{db:.4}")
    }
}

fn check(a: &[Coord], b: &[Coord]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

/// Nearest neighbour in `to` of every point of `from`, with the
/// displacement `to[nn] - from[i]`.
fn nearest(from: &[Coord], to: &[Coord]) -> Result<Vec<(usize, [f64; 3])>> {
    let adj = build_knn(from, to, 1)?;
    Ok((0..from.len())
        .map(|i| {
            let o = adj.offsets(i)[0];
            (adj.row(i)[0] as usize, [-o[0] as f64, -o[1] as f64, -o[2] as f64])
        })
        .collect())
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Symmetric point-to-point MSE: the larger of the two directions.
pub fn d1_mse(rec: &[Coord], reference: &[Coord]) -> Result<f64> {
    check(rec, reference)?;
    let one = |a: &[Coord], b: &[Coord]| -> Result<f64> {
        let nn = nearest(a, b)?;
        Ok(mean(nn.iter().map(|(_, d)| d.iter().map(|v| v * v).sum::<f64>()), a.len()))
    };
    Ok(one(rec, reference)?.max(one(reference, rec)?))
}

pub fn d1_psnr(rec: &[Coord], reference: &[Coord], peak: f64) -> Result<f64> {
    Ok(psnr(d1_mse(rec, reference)?, peak))
}

/// Unit normals of `cloud` by PCA over the 12 nearest points, oriented
/// away from the centroid. `None` where the neighbourhood has rank < 2.
pub fn estimate_normals(cloud: &[Coord]) -> Result<Vec<Option<[f64; 3]>>> {
    if cloud.len() < NORMAL_NEIGHBORS {
        return Err(Error::InvalidConfig(format!(
            "normal estimation needs {NORMAL_NEIGHBORS} points, cloud has {}",
            cloud.len()
        )));
    }
    let adj = build_knn(cloud, cloud, NORMAL_NEIGHBORS)?;
    let n = cloud.len() as f64;
    let centroid = (0..3).map(|a| cloud.iter().map(|c| c[a] as f64).sum::<f64>() / n).collect::<Vec<_>>();
    Ok(par::map_range(cloud.len(), |i| {
        let pts: Vec<Vector3<f64>> = adj
            .row(i)
            .iter()
            .map(|&j| {
                let c = cloud[j as usize];
                Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)
            })
            .collect();
        let m = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let mut cov = Matrix3::zeros();
        for p in &pts {
            let d = p - m;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let scale = eig.eigenvalues[order[2]].abs().max(1e-300);
        if eig.eigenvalues[order[1]].abs() <= 1e-9 * scale {
            return None;
        }
        let v = eig.eigenvectors.column(order[0]).into_owned();
        let c = cloud[i];
        let out = Vector3::new(c[0] as f64 - centroid[0], c[1] as f64 - centroid[1], c[2] as f64 - centroid[2]);
        let v = if v.dot(&out) < 0.0 { -v } else { v };
        Some([v[0], v[1], v[2]])
    }))
}

fn plane_error(d: [f64; 3], normal: Option<[f64; 3]>) -> f64 {
    match normal {
        Some(n) => {
            let p = d[0] * n[0] + d[1] * n[1] + d[2] * n[2];
            p * p
        }
        // Normal along the displacement: the full squared distance.
        None => d.iter().map(|v| v * v).sum(),
    }
}

/// Symmetric point-to-plane MSE with normals estimated on `reference`.
pub fn d2_mse(rec: &[Coord], reference: &[Coord]) -> Result<f64> {
    check(rec, reference)?;
    let normals = estimate_normals(reference)?;
    let fwd = nearest(rec, reference)?;
    let a = mean(fwd.iter().map(|&(j, d)| plane_error(d, normals[j])), rec.len());
    let bwd = nearest(reference, rec)?;
    let b = mean(bwd.iter().enumerate().map(|(i, &(_, d))| plane_error(d, normals[i])), reference.len());
    Ok(a.max(b))
}

pub fn d2_psnr(rec: &[Coord], reference: &[Coord], peak: f64) -> Result<f64> {
    Ok(psnr(d2_mse(rec, reference)?, peak))
}

/// Least-squares cubic `log(rate) = p(psnr - shift)`.
fn fit_cubic(curve: &[(f64, f64)], shift: f64) -> Result<[f64; 4]> {
    let n = curve.len();
    let a = DMatrix::from_fn(n, 4, |r, c| (curve[r].1 - shift).powi(c as i32));
    let y = DVector::from_iterator(n, curve.iter().map(|p| p.0.ln()));
    let svd = a.svd(true, true);
    let x = svd
        .solve(&y, 1e-12)
        .map_err(|e| Error::InvalidConfig(format!("rate curve fit failed: {e}")))?;
    Ok([x[0], x[1], x[2], x[3]])
}

fn integral(p: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| p[0] * x + p[1] * x * x / 2.0 + p[2] * x.powi(3) / 3.0 + p[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Average rate change of `b` against `a` at equal quality, in percent.
/// Points are `(bpp, psnr)`; each curve needs at least four.
pub fn bd_rate(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    for c in [a, b] {
        if c.len() < 4 {
            return Err(Error::InvalidConfig(format!("a curve needs 4 points, got {}", c.len())));
        }
        if c.iter().any(|&(r, q)| !(r > 0.0) || !q.is_finite()) {
            return Err(Error::InvalidConfig("rates must be positive and PSNRs finite".into()));
        }
    }
    let range = |c: &[(f64, f64)]| {
        c.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)))
    };
    let (la, ha) = range(a);
    let (lb, hb) = range(b);
    let (lo, hi) = (la.max(lb), ha.min(hb));
    if !(hi > lo) {
        return Err(Error::NoOverlap);
    }
    let shift = (lo + hi) / 2.0;
    let pa = fit_cubic(a, shift)?;
    let pb = fit_cubic(b, shift)?;
    let (x0, x1) = (lo - shift, hi - shift);
    let avg = (integral(&pb, x0, x1) - integral(&pa, x0, x1)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}
