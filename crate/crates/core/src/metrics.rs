//! Sample-quality metrics for low-dimensional point clouds: k-NN density and
//! coverage, the Fréchet distance between Gaussian fits, and mode coverage
//! of a known mixture.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{sq_dist, Matrix};

/// Diagonal jitter added to fitted covariances before the square root.
pub const COV_EPS: f64 = 1e-10;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub density: f64,
    pub coverage: f64,
    pub frechet: f64,
    pub mode_coverage: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

/// Settings for [`evaluate`]. Mode-coverage defaults (radius `3 sigma`,
/// share `0.2`) are common toy-GAN practice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub k: usize,
    pub mode_radius: f64,
    pub mode_min_frac: f64,
}

impl MetricConfig {
    pub fn for_mode_std(std: f64) -> Self {
        MetricConfig {
            k: DEFAULT_K,
            mode_radius: 3.0 * std,
            mode_min_frac: 0.2,
        }
    }
}

/// Squared distance from each real sample to its k-th nearest other real
/// sample.
fn knn_radii_sq(real: &Matrix, k: usize) -> Vec<f64> {
    let n = real.rows();
    let mut d = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            d.clear();
            d.extend((0..n).filter(|&j| j != i).map(|j| sq_dist(real.row(i), real.row(j))));
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Density and coverage of `fake` against the k-NN balls of `real`.
///
/// Balls are closed: a fake sample on the boundary counts.
pub fn density_coverage(real: &Matrix, fake: &Matrix, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if real.rows() <= k || fake.rows() <= k {
        return Err(Error::InvalidArgument(format!(
            "density/coverage with k = {k} needs more than {k} samples per set (got {} real, {} fake)",
            real.rows(),
            fake.rows()
        )));
    }
    if real.cols() != fake.cols() {
        return Err(shape_err(format!("{} columns", real.cols()), format!("{}", fake.cols())));
    }
    let radii = knn_radii_sq(real, k);
    let mut inside = 0usize;
    let mut covered = 0usize;
    for (i, r) in real.iter_rows().enumerate() {
        let mut hit = false;
        for f in fake.iter_rows() {
            if sq_dist(r, f) <= radii[i] {
                inside += 1;
                hit = true;
            }
        }
        covered += hit as usize;
    }
    let density = inside as f64 / (k as f64 * fake.rows() as f64);
    let coverage = covered as f64 / real.rows() as f64;
    Ok((density, coverage))
}

fn mean_cov(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let mean = x.column_mean();
    let mut cov = vec![0.0; d * d];
    for r in x.iter_rows() {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    let denom = (x.rows() - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    for a in 0..d {
        cov[a * d + a] += COV_EPS;
    }
    (mean, cov)
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            for j in 0..d {
                out[i * d + j] += a[i * d + k] * b[k * d + j];
            }
        }
    }
    out
}

/// `tr((S1 S2)^{1/2})` for SPD `S1`, `S2`.
fn trace_sqrt_product(s1: &[f64], s2: &[f64], d: usize) -> f64 {
    match d {
        1 => (s1[0] * s2[0]).sqrt(),
        2 => {
            // The eigenvalues of S1 S2 are positive, so
            // (sqrt l1 + sqrt l2)^2 = tr(S1 S2) + 2 sqrt(det S1 det S2).
            let p = matmul(s1, s2, 2);
            let tr = p[0] + p[3];
            let det1 = s1[0] * s1[3] - s1[1] * s1[2];
            let det2 = s2[0] * s2[3] - s2[1] * s2[2];
            (tr + 2.0 * (det1 * det2).max(0.0).sqrt()).max(0.0).sqrt()
        }
        _ => {
            // S1^{1/2} S2 S1^{1/2} is symmetric with the same spectrum as S1 S2.
            // Its square root is taken through eigenvalues of S1 and the
            // similarity S1^{1/2} = V diag(sqrt l) V^T, built by Jacobi on S1
            // with accumulated rotations.
            let (vals, vecs) = symmetric_eigen(s1.to_vec(), d);
            let mut root = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    root[i * d + j] = (0..d).map(|k| vecs[i * d + k] * vals[k].max(0.0).sqrt() * vecs[j * d + k]).sum();
                }
            }
            let m = matmul(&matmul(&root, s2, d), &root, d);
            symmetric_eigen(m, d).0.iter().map(|l| l.max(0.0).sqrt()).sum()
        }
    }
}

/// Cyclic Jacobi eigendecomposition returning eigenvalues and column
/// eigenvectors.
fn symmetric_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d * d).filter(|k| k / d != k % d).map(|k| a[k] * a[k]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Fréchet distance between the Gaussian fits of two clouds:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn frechet_gaussian(real: &Matrix, fake: &Matrix) -> Result<f64> {
    let d = real.cols();
    if fake.cols() != d {
        return Err(shape_err(format!("{d} columns"), format!("{}", fake.cols())));
    }
    if d == 0 || real.rows() < d + 1 || fake.rows() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "Fréchet distance in {d} dimensions needs at least {} samples per set",
            d + 1
        )));
    }
    let (m1, s1) = mean_cov(real);
    let (m2, s2) = mean_cov(fake);
    Ok(frechet_from_moments(&m1, &s1, &m2, &s2))
}

/// Fréchet distance from means and row-major covariances.
pub fn frechet_from_moments(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> f64 {
    let d = m1.len();
    let mean_term = sq_dist(m1, m2);
    let tr: f64 = (0..d).map(|i| s1[i * d + i] + s2[i * d + i]).sum();
    (mean_term + tr - 2.0 * trace_sqrt_product(s1, s2, d)).max(0.0)
}

/// Fraction of modes holding at least `min_frac * |fake| / modes` samples
/// within `radius` of their center.
pub fn mode_coverage(fake: &Matrix, mode_centers: &Matrix, radius: f64, min_frac: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if !(min_frac > 0.0 && min_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("min_frac must lie in (0, 1), got {min_frac}")));
    }
    if mode_centers.rows() == 0 {
        return Err(Error::Empty("mode centers"));
    }
    if fake.cols() != mode_centers.cols() {
        return Err(shape_err(format!("{} columns", mode_centers.cols()), format!("{}", fake.cols())));
    }
    let threshold = min_frac * fake.rows() as f64 / mode_centers.rows() as f64;
    let r2 = radius * radius;
    let covered = mode_centers
        .iter_rows()
        .filter(|c| {
            let count = fake.iter_rows().filter(|f| sq_dist(f, c) <= r2).count();
            count > 0 && count as f64 >= threshold
        })
        .count();
    Ok(covered as f64 / mode_centers.rows() as f64)
}

/// All metrics at once.
pub fn evaluate(real: &Matrix, fake: &Matrix, mode_centers: &Matrix, cfg: &MetricConfig) -> Result<MetricReport> {
    let (density, coverage) = density_coverage(real, fake, cfg.k)?;
    Ok(MetricReport {
        density,
        coverage,
        frechet: frechet_gaussian(real, fake)?,
        mode_coverage: mode_coverage(fake, mode_centers, cfg.mode_radius, cfg.mode_min_frac)?,
        n_real: real.rows(),
        n_fake: fake.rows(),
    })
}
