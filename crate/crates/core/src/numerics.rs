//! Dense matrices, the seeded random stream, stable reductions and
//! finite-difference helpers.
//!
//! Everything is `f64` and row-major. Vectors are plain slices; a [`Matrix`]
//! is a batch of row vectors.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Norms at or below this value are rejected by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                format!("{} entries for {rows}x{cols}", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite matrix entry {bad}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice yields a
    /// `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(
                    format!("row {i} of length {cols}"),
                    format!("length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows == 0 {
            return Ok(other.clone());
        }
        if other.rows == 0 {
            return Ok(self.clone());
        }
        if self.cols != other.cols {
            return Err(shape_err(
                format!("{} columns", self.cols),
                format!("{} columns", other.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_vec_unchecked(self.rows + other.rows, self.cols, data))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec_unchecked(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Copy of the matrix with row `skip` removed.
    pub fn without_row(&self, skip: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len().saturating_sub(self.cols));
        for i in (0..self.rows).filter(|&i| i != skip) {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec_unchecked(self.rows - 1, self.cols, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn column_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Seeded pseudo-random stream.
///
/// Backed by ChaCha8 seeded through `seed_from_u64`; normals come from the
/// ziggurat sampler of `rand_distr`. The golden tests below pin the stream,
/// so changing either backend is a breaking change for every recorded run.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this generator's seed and a
    /// stream id. Does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

/// `n` rows of independent Gaussian draws with per-coordinate mean and
/// standard deviation.
pub fn sample_gaussian(rng: &mut Rng, n: usize, mean: &[f64], std: &[f64]) -> Result<Matrix> {
    if mean.len() != std.len() {
        return Err(shape_err(
            format!("std of length {}", mean.len()),
            format!("length {}", std.len()),
        ));
    }
    if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation must be positive, got {s}"
        )));
    }
    let dim = mean.len();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        for (m, s) in mean.iter().zip(std) {
            data.push(m + s * rng.normal());
        }
    }
    Ok(Matrix::from_vec_unchecked(n, dim, data))
}

/// `n` points uniform in the axis-aligned box `center ± half_width`.
pub fn sample_uniform_square(
    rng: &mut Rng,
    n: usize,
    center: &[f64],
    half_width: f64,
) -> Result<Matrix> {
    if !(half_width > 0.0) || !half_width.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "half width must be positive, got {half_width}"
        )));
    }
    let dim = center.len();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        for c in center {
            data.push(c + half_width * (2.0 * rng.uniform() - 1.0));
        }
    }
    Ok(Matrix::from_vec_unchecked(n, dim, data))
}

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn sample_unit_direction(rng: &mut Rng, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidArgument("direction dimension must be >= 1".into()));
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > EPS_NORM {
            return Ok(v.iter().map(|x| x / n).collect());
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `log Σ exp(v_i)`, shifted by the maximum so it cannot overflow.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("log_sum_exp of an empty slice"));
    }
    Ok(log_sum_exp_unchecked(values))
}

pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error between an analytic and a numeric gradient, taken over the
/// whole vector so that tiny components do not amplify round-off:
/// `|a - n|_2 / max(|a|_2, |n|_2, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(floor)
}

/// Vector-Jacobian product of `v -> v / |v|`, captured at the forward point.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeBackward {
    unit: Vec<f64>,
    norm: f64,
}

impl NormalizeBackward {
    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Applies `(I - u u^T) / |v|` to the upstream gradient.
    pub fn apply(&self, upstream: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; upstream.len()];
        self.apply_into(upstream, &mut out);
        out
    }

    pub(crate) fn apply_into(&self, upstream: &[f64], out: &mut [f64]) {
        normalize_vjp(&self.unit, self.norm, upstream, out);
    }
}

pub(crate) fn normalize_vjp(unit: &[f64], norm: f64, upstream: &[f64], out: &mut [f64]) {
    let radial = dot(unit, upstream);
    for ((o, g), u) in out.iter_mut().zip(upstream).zip(unit) {
        *o = (g - radial * u) / norm;
    }
}

/// Projects `v` onto the unit sphere and returns the backward map.
pub fn l2_normalize(v: &[f64]) -> Result<(Vec<f64>, NormalizeBackward)> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateNorm { norm: n });
    }
    let unit: Vec<f64> = v.iter().map(|x| x / n).collect();
    Ok((unit.clone(), NormalizeBackward { unit, norm: n }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::seeded(42);
        let mut b = Rng::seeded(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::seeded(43);
        let mut a = Rng::seeded(42);
        let same = (0..100).filter(|_| a.next_u64() == c.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn golden_stream_seed_zero() {
        // Pins the generator backend. Seed 0 must not degenerate.
        let mut rng = Rng::seeded(0);
        let draws: Vec<u64> = (0..10).map(|_| rng.next_u64()).collect();
        assert!(draws.iter().all(|&d| d != 0));
        let distinct: std::collections::BTreeSet<_> = draws.iter().collect();
        assert_eq!(distinct.len(), 10);
        let mut rng = Rng::seeded(0);
        let first = rng.next_u64();
        assert_eq!(first, GOLDEN_SEED0_FIRST);
        let mut rng = Rng::seeded(7);
        let u = rng.uniform();
        let z = rng.normal();
        assert_eq!(u.to_bits(), GOLDEN_SEED7_UNIFORM);
        assert_eq!(z.to_bits(), GOLDEN_SEED7_NORMAL);
    }

    const GOLDEN_SEED0_FIRST: u64 = 13080132717333068652;
    const GOLDEN_SEED7_UNIFORM: u64 = 0x3fc432a99a11eba0;
    const GOLDEN_SEED7_NORMAL: u64 = 0xbff6227ed04031ea;

    #[test]
    fn gaussian_law_of_large_numbers() {
        let mut rng = Rng::seeded(1);
        let m = sample_gaussian(&mut rng, 100_000, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        for c in m.column_mean() {
            assert!(c.abs() < 0.02, "mean {c}");
        }
    }

    #[test]
    fn gaussian_edge_cases() {
        let mut rng = Rng::seeded(1);
        let m = sample_gaussian(&mut rng, 1, &[3.0, -1.0], &[1e-12, 1e-12]).unwrap();
        assert!((m.get(0, 0) - 3.0).abs() < 1e-9 && (m.get(0, 1) + 1.0).abs() < 1e-9);
        let e = sample_gaussian(&mut rng, 0, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(e.shape(), (0, 2));
        assert!(sample_gaussian(&mut rng, 3, &[0.0], &[0.0]).is_err());
        assert!(sample_gaussian(&mut rng, 3, &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn uniform_square_support_and_mean() {
        let mut rng = Rng::seeded(2);
        let m = sample_uniform_square(&mut rng, 1000, &[0.0, 0.0], 1.0).unwrap();
        assert!(m.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        let m = sample_uniform_square(&mut rng, 100_000, &[0.5, -2.0], 1.0).unwrap();
        let mean = m.column_mean();
        assert!((mean[0] - 0.5).abs() < 0.02 && (mean[1] + 2.0).abs() < 0.02);
        assert!(sample_uniform_square(&mut rng, 10, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn unit_directions() {
        let mut rng = Rng::seeded(3);
        let d = sample_unit_direction(&mut rng, 2).unwrap();
        assert!((norm(&d) - 1.0).abs() < 1e-12);
        for _ in 0..20 {
            let d = sample_unit_direction(&mut rng, 1).unwrap();
            assert!(d[0] == 1.0 || d[0] == -1.0);
        }
        let mut mean = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let d = sample_unit_direction(&mut rng, 3).unwrap();
            for (m, v) in mean.iter_mut().zip(&d) {
                *m += v / n as f64;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 0.02), "{mean:?}");
        assert!(sample_unit_direction(&mut rng, 0).is_err());
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln());
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        assert!(log_sum_exp(&[700.0, -700.0, 699.0]).unwrap().is_finite());
        assert_eq!(log_sum_exp(&[]), Err(Error::Empty("log_sum_exp of an empty slice")));
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.5, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = finite_diff_grad(|x| x[0].sin(), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
        assert!(finite_diff_grad(|x| x[0], &[0.0], -1e-5).is_err());
    }

    #[test]
    fn normalize_examples() {
        let (u, back) = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let (u2, back2) = l2_normalize(&u).unwrap();
        assert!((u2[0] - 0.6).abs() < 1e-15 && (u2[1] - 0.8).abs() < 1e-15);
        let g = back2.apply(&[1.2, 1.6]);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(back.norm(), 5.0);
        assert!(matches!(
            l2_normalize(&[1e-13, 0.0]),
            Err(Error::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = Rng::seeded(11);
        for _ in 0..50 {
            let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let up: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let (_, back) = l2_normalize(&v).unwrap();
            let analytic = back.apply(&up);
            let numeric = finite_diff_grad(
                |x| dot(&l2_normalize(x).unwrap().0, &up),
                &v,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(relative_error(&analytic, &numeric, 1e-12) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn lse_shift_identity(v in proptest::collection::vec(-300.0f64..300.0, 1..20)) {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted: Vec<f64> = v.iter().map(|x| x - max).collect();
            prop_assert_eq!(log_sum_exp(&v).unwrap(), max + log_sum_exp(&shifted).unwrap());
        }

        #[test]
        fn normalize_backward_is_tangent(
            v in proptest::collection::vec(-10.0f64..10.0, 2..6),
            seed in 0u64..1000,
        ) {
            prop_assume!(norm(&v) > 1e-3);
            let mut rng = Rng::seeded(seed);
            let g: Vec<f64> = v.iter().map(|_| rng.normal()).collect();
            let (u, back) = l2_normalize(&v).unwrap();
            prop_assert!(dot(&u, &back.apply(&g)).abs() < 1e-12);
        }

        #[test]
        fn finite_diff_exact_on_quadratics(
            a in proptest::collection::vec(-3.0f64..3.0, 3),
            b in proptest::collection::vec(-3.0f64..3.0, 3),
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            c in -3.0f64..3.0,
        ) {
            // f(x) = sum a_i x_i^2 + b.x + c + x0 x1
            let f = |x: &[f64]| {
                a.iter().zip(x).map(|(ai, xi)| ai * xi * xi).sum::<f64>() + dot(&b, x) + c + x[0] * x[1]
            };
            let analytic: Vec<f64> = (0..3)
                .map(|i| {
                    2.0 * a[i] * x[i] + b[i] + match i { 0 => x[1], 1 => x[0], _ => 0.0 }
                })
                .collect();
            let numeric = finite_diff_grad(f, &x, DEFAULT_FD_STEP).unwrap();
            prop_assert!(relative_error(&analytic, &numeric, 1.0) < 1e-8);
        }
    }
}
