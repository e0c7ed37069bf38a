//! Kernel density estimates in feature space.
//!
//! Kernels are evaluated in unnormalized log form: the normalizer of a kernel
//! is shared by every anchor of every set, so it drops out of each log-ratio
//! and of each gradient of a log-density.
//!
//! * von Mises-Fisher: `log k(a, q) = <a, q> / tau`, for unit-norm features.
//! * Gaussian: `log k(a, q) = -|a - q|^2 / (2 sigma^2)`.
//!
//! A log-KDE is the log of the *mean* kernel value over the anchors, computed
//! with a max-shifted log-sum-exp. Gradients use the softmax weights of the
//! log-kernel values, which is the `1 / (|S| p(x))` normalization of a
//! differentiated KDE.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, log_sum_exp_unchecked, norm, sq_dist, Matrix};

/// Tolerance on `|row| - 1` for vMF inputs.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(<a, b> / tau)` on the unit sphere.
    VonMisesFisher { tau: f64 },
    /// `exp(-|a - b|^2 / (2 sigma^2))`.
    Gaussian { sigma: f64 },
}

impl KernelSpec {
    pub fn vmf(tau: f64) -> Result<Self> {
        KernelSpec::VonMisesFisher { tau }.validated()
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        KernelSpec::Gaussian { sigma }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        let (name, v) = match self {
            KernelSpec::VonMisesFisher { tau } => ("temperature", tau),
            KernelSpec::Gaussian { sigma } => ("bandwidth", sigma),
        };
        if v > 0.0 && v.is_finite() {
            Ok(self)
        } else {
            Err(Error::InvalidArgument(format!("kernel {name} must be positive, got {v}")))
        }
    }

    pub fn requires_unit_norm(&self) -> bool {
        matches!(self, KernelSpec::VonMisesFisher { .. })
    }

    #[inline]
    pub(crate) fn eval(&self, anchor: &[f64], query: &[f64]) -> f64 {
        match *self {
            KernelSpec::VonMisesFisher { tau } => dot(anchor, query) / tau,
            KernelSpec::Gaussian { sigma } => -sq_dist(anchor, query) / (2.0 * sigma * sigma),
        }
    }

    /// Adds `scale * d log k / d query` into `gq` and
    /// `scale * d log k / d anchor` into `ga`.
    #[inline]
    pub(crate) fn accumulate_grad(
        &self,
        anchor: &[f64],
        query: &[f64],
        scale: f64,
        gq: &mut [f64],
        ga: &mut [f64],
    ) {
        match *self {
            KernelSpec::VonMisesFisher { tau } => {
                let s = scale / tau;
                for k in 0..query.len() {
                    gq[k] += s * anchor[k];
                    ga[k] += s * query[k];
                }
            }
            KernelSpec::Gaussian { sigma } => {
                let s = scale / (sigma * sigma);
                for k in 0..query.len() {
                    let d = anchor[k] - query[k];
                    gq[k] += s * d;
                    ga[k] -= s * d;
                }
            }
        }
    }

    pub(crate) fn check_point(&self, v: &[f64], row: usize) -> Result<()> {
        if self.requires_unit_norm() {
            let n = norm(v);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotUnitNorm { row, norm: n });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Generated,
}

/// Anchor points of one KDE.
///
/// The first `base_len` rows are the minibatch itself; any further rows are
/// augmented copies, and `augmented_from[j]` names the base row that
/// augmented row `base_len + j` was derived from. Loss terms are evaluated
/// at base rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    features: Matrix,
    origin: Origin,
    base_len: usize,
    augmented_from: Vec<usize>,
}

impl AnchorSet {
    pub fn new(features: Matrix, origin: Origin) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Empty("anchor set"));
        }
        let base_len = features.rows();
        Ok(AnchorSet {
            features,
            origin,
            base_len,
            augmented_from: Vec::new(),
        })
    }

    /// Anchor set whose rows past `base_len` are augmentations of the base
    /// rows listed in `augmented_from`.
    pub fn with_augmentation(
        features: Matrix,
        origin: Origin,
        base_len: usize,
        augmented_from: Vec<usize>,
    ) -> Result<Self> {
        if base_len == 0 {
            return Err(Error::Empty("anchor set"));
        }
        if base_len + augmented_from.len() != features.rows() {
            return Err(shape_err(
                format!("{} rows", base_len + augmented_from.len()),
                format!("{} rows", features.rows()),
            ));
        }
        if let Some(bad) = augmented_from.iter().find(|&&i| i >= base_len) {
            return Err(Error::InvalidArgument(format!(
                "augmented row refers to base row {bad} of {base_len}"
            )));
        }
        Ok(AnchorSet {
            features,
            origin,
            base_len,
            augmented_from,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn augmented_from(&self) -> &[usize] {
        &self.augmented_from
    }

    pub fn is_augmented_row(&self, row: usize) -> bool {
        row >= self.base_len
    }

    /// Same anchor bookkeeping over new per-row values (e.g. the features of
    /// the points this set was assembled from).
    pub fn map_features(&self, features: Matrix) -> Result<AnchorSet> {
        if features.rows() != self.len() {
            return Err(shape_err(
                format!("{} rows", self.len()),
                format!("{} rows", features.rows()),
            ));
        }
        Ok(AnchorSet {
            features,
            origin: self.origin,
            base_len: self.base_len,
            augmented_from: self.augmented_from.clone(),
        })
    }

    /// Checks every row against the kernel's domain.
    pub fn validate_for(&self, spec: &KernelSpec) -> Result<()> {
        for (i, row) in self.features.iter_rows().enumerate() {
            spec.check_point(row, i)?;
        }
        Ok(())
    }
}

fn check_query(spec: &KernelSpec, anchors: &AnchorSet, query: &[f64]) -> Result<()> {
    spec.validated()?;
    if query.len() != anchors.dim() {
        return Err(shape_err(
            format!("query of dimension {}", anchors.dim()),
            format!("dimension {}", query.len()),
        ));
    }
    spec.check_point(query, 0)?;
    anchors.validate_for(spec)
}

fn check_exclude(anchors: &AnchorSet, exclude: Option<usize>) -> Result<()> {
    match exclude {
        Some(i) if i >= anchors.len() => Err(Error::InvalidArgument(format!(
            "excluded index {i} out of range for {} anchors",
            anchors.len()
        ))),
        Some(_) if anchors.len() == 1 => Err(Error::ExclusionEmptiesSet),
        _ => Ok(()),
    }
}

/// Log-kernel value between two points.
pub fn log_kernel(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    spec.validated()?;
    if a.len() != b.len() {
        return Err(shape_err(format!("dimension {}", a.len()), format!("dimension {}", b.len())));
    }
    spec.check_point(a, 0)?;
    spec.check_point(b, 1)?;
    Ok(spec.eval(a, b))
}

/// `log((1/n) Σ exp(v_i))` over already-computed log-kernel values.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("log_mean_exp of an empty slice"));
    }
    Ok(log_sum_exp_unchecked(values) - (values.len() as f64).ln())
}

pub(crate) fn log_kernels_into(
    spec: &KernelSpec,
    anchors: &Matrix,
    query: &[f64],
    exclude: Option<usize>,
    out: &mut Vec<f64>,
) {
    out.clear();
    for (i, a) in anchors.iter_rows().enumerate() {
        if Some(i) != exclude {
            out.push(spec.eval(a, query));
        }
    }
}

pub(crate) fn log_kde_unchecked(
    spec: &KernelSpec,
    anchors: &Matrix,
    query: &[f64],
    exclude: Option<usize>,
    scratch: &mut Vec<f64>,
) -> f64 {
    log_kernels_into(spec, anchors, query, exclude, scratch);
    log_sum_exp_unchecked(scratch) - (scratch.len() as f64).ln()
}

/// Adds `scale * d log_kde / d query` into `grad_query` and
/// `scale * d log_kde / d anchor_i` into row `i` of `grad_anchors`.
/// Returns the log-KDE value. `scratch` is overwritten with the softmax
/// weights (one per included anchor).
pub(crate) fn accumulate_log_kde_grad(
    spec: &KernelSpec,
    anchors: &Matrix,
    query: &[f64],
    exclude: Option<usize>,
    scale: f64,
    grad_query: &mut [f64],
    grad_anchors: &mut Matrix,
    scratch: &mut Vec<f64>,
) -> f64 {
    log_kernels_into(spec, anchors, query, exclude, scratch);
    let lse = log_sum_exp_unchecked(scratch);
    let value = lse - (scratch.len() as f64).ln();
    for w in scratch.iter_mut() {
        *w = (*w - lse).exp();
    }
    let mut j = 0;
    for i in 0..anchors.rows() {
        if Some(i) == exclude {
            continue;
        }
        let w = scratch[j];
        j += 1;
        if scale != 0.0 && w != 0.0 {
            spec.accumulate_grad(anchors.row(i), query, scale * w, grad_query, grad_anchors.row_mut(i));
        }
    }
    value
}

/// Log of the KDE at `query`, optionally leaving one anchor out.
pub fn log_kde(
    spec: &KernelSpec,
    anchors: &AnchorSet,
    query: &[f64],
    exclude: Option<usize>,
) -> Result<f64> {
    check_query(spec, anchors, query)?;
    check_exclude(anchors, exclude)?;
    let mut scratch = Vec::with_capacity(anchors.len());
    Ok(log_kde_unchecked(spec, anchors.features(), query, exclude, &mut scratch))
}

/// `log p_real(query) - log p_gen(query)`.
pub fn log_density_ratio(
    spec: &KernelSpec,
    real_anchors: &AnchorSet,
    gen_anchors: &AnchorSet,
    query: &[f64],
    exclude_real: Option<usize>,
    exclude_gen: Option<usize>,
) -> Result<f64> {
    Ok(log_kde(spec, real_anchors, query, exclude_real)?
        - log_kde(spec, gen_anchors, query, exclude_gen)?)
}

/// Gradients of [`log_kde`] with respect to the query and every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeGradient {
    pub value: f64,
    pub grad_query: Vec<f64>,
    /// One row per anchor; the excluded row is zero.
    pub grad_anchors: Matrix,
    /// Softmax weight of each anchor; zero for the excluded one.
    pub weights: Vec<f64>,
}

pub fn log_kde_backward(
    spec: &KernelSpec,
    anchors: &AnchorSet,
    query: &[f64],
    exclude: Option<usize>,
) -> Result<KdeGradient> {
    check_query(spec, anchors, query)?;
    check_exclude(anchors, exclude)?;
    let mut grad_query = vec![0.0; query.len()];
    let mut grad_anchors = Matrix::zeros(anchors.len(), anchors.dim());
    let mut scratch = Vec::with_capacity(anchors.len());
    let value = accumulate_log_kde_grad(
        spec,
        anchors.features(),
        query,
        exclude,
        1.0,
        &mut grad_query,
        &mut grad_anchors,
        &mut scratch,
    );
    let mut weights = Vec::with_capacity(anchors.len());
    let mut j = 0;
    for i in 0..anchors.len() {
        if Some(i) == exclude {
            weights.push(0.0);
        } else {
            weights.push(scratch[j]);
            j += 1;
        }
    }
    Ok(KdeGradient {
        value,
        grad_query,
        grad_anchors,
        weights,
    })
}

/// Index of the anchor with the largest log-kernel value; ties go to the
/// lowest index.
pub fn nearest_anchor(spec: &KernelSpec, anchors: &AnchorSet, query: &[f64]) -> Result<usize> {
    check_query(spec, anchors, query)?;
    Ok(nearest_unchecked(spec, anchors.features(), query))
}

fn nearest_unchecked(spec: &KernelSpec, anchors: &Matrix, query: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, a) in anchors.iter_rows().enumerate() {
        let v = spec.eval(a, query);
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Per-sample generator gradient `d/dq [log p_gen(q) - log p_real(q)]`
/// keeping only the nearest anchor of each set in the inner sums.
///
/// Each kept term is the nearest anchor's kernel derivative divided by the
/// full (unexcluded) kernel sum of its set, i.e. that anchor's softmax weight
/// times its log-kernel derivative. With one anchor per set this is exactly
/// the full gradient.
pub fn nn_grad_approx(
    spec: &KernelSpec,
    real_anchors: &AnchorSet,
    gen_anchors: &AnchorSet,
    query: &[f64],
) -> Result<Vec<f64>> {
    check_query(spec, real_anchors, query)?;
    check_query(spec, gen_anchors, query)?;
    let mut grad = vec![0.0; query.len()];
    let mut sink = vec![0.0; query.len()];
    let mut scratch = Vec::new();
    for (set, sign) in [(gen_anchors, 1.0), (real_anchors, -1.0)] {
        let feats = set.features();
        let nn = nearest_unchecked(spec, feats, query);
        log_kernels_into(spec, feats, query, None, &mut scratch);
        let lse = log_sum_exp_unchecked(&scratch);
        let weight = (scratch[nn] - lse).exp();
        spec.accumulate_grad(feats.row(nn), query, sign * weight, &mut grad, &mut sink);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_normalize, relative_error, Rng};
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize(v).unwrap().0
    }

    fn set(rows: &[Vec<f64>], origin: Origin) -> AnchorSet {
        AnchorSet::new(Matrix::from_rows(rows).unwrap(), origin).unwrap()
    }

    fn random_unit_rows(rng: &mut Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| unit(&(0..k).map(|_| rng.normal()).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn log_kernel_examples() {
        let vmf1 = KernelSpec::vmf(1.0).unwrap();
        let a = unit(&[1.0, 1.0]);
        assert!((log_kernel(&vmf1, &a, &a).unwrap() - 1.0).abs() < 1e-15);
        let vmf = KernelSpec::vmf(0.05).unwrap();
        assert_eq!(log_kernel(&vmf, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let g = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(log_kernel(&g, &[0.0, 0.0], &[2.0, 0.0]).unwrap(), -2.0);
        assert!(matches!(
            log_kernel(&vmf, &[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            log_kernel(&vmf, &[2.0, 0.0], &[1.0, 0.0]),
            Err(Error::NotUnitNorm { .. })
        ));
        assert!(KernelSpec::vmf(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
    }

    #[test]
    fn log_kde_examples() {
        let spec = KernelSpec::vmf(1.0).unwrap();
        let q = unit(&[0.3, -0.7]);
        let single = set(std::slice::from_ref(&q), Origin::Real);
        assert!((log_kde(&spec, &single, &q, None).unwrap() - 1.0).abs() < 1e-15);

        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        let pair = set(&[q.clone(), neg], Origin::Real);
        let expected = 1f64.cosh().ln();
        assert!((log_kde(&spec, &pair, &q, None).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.43378).abs() < 1e-5);

        let r = unit(&[1.0, 0.2]);
        let qr = set(&[q.clone(), r.clone()], Origin::Real);
        assert_eq!(
            log_kde(&spec, &qr, &q, Some(0)).unwrap(),
            log_kernel(&spec, &r, &q).unwrap()
        );
        assert_eq!(log_kde(&spec, &single, &q, Some(0)), Err(Error::ExclusionEmptiesSet));
    }

    #[test]
    fn density_ratio_against_naive_sum() {
        let spec = KernelSpec::vmf(0.5).unwrap();
        let mut rng = Rng::seeded(17);
        let real_rows = random_unit_rows(&mut rng, 3, 3);
        let gen_rows = random_unit_rows(&mut rng, 3, 3);
        let q = random_unit_rows(&mut rng, 1, 3).remove(0);
        let naive = |rows: &[Vec<f64>]| {
            let s: f64 = rows.iter().map(|a| (dot(a, &q) / 0.5).exp()).sum();
            (s / rows.len() as f64).ln()
        };
        let expected = naive(&real_rows) - naive(&gen_rows);
        let got = log_density_ratio(
            &spec,
            &set(&real_rows, Origin::Real),
            &set(&gen_rows, Origin::Generated),
            &q,
            None,
            None,
        )
        .unwrap();
        assert!((got - expected).abs() < 1e-12);

        let same = set(&real_rows, Origin::Real);
        assert_eq!(log_density_ratio(&spec, &same, &same, &q, None, None).unwrap(), 0.0);
    }

    #[test]
    fn vmf_query_gradient_is_weighted_anchor_mean() {
        let spec = KernelSpec::vmf(1.0).unwrap();
        let a = unit(&[0.6, 0.8]);
        let q = unit(&[1.0, 0.0]);
        let g = log_kde_backward(&spec, &set(std::slice::from_ref(&a), Origin::Real), &q, None).unwrap();
        assert_eq!(g.grad_query, a);
        assert_eq!(g.weights, vec![1.0]);

        let gauss = KernelSpec::gaussian(1.0).unwrap();
        let g = log_kde_backward(&gauss, &set(std::slice::from_ref(&q), Origin::Real), &q, None).unwrap();
        assert!(g.grad_query.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn excluded_row_has_zero_gradient() {
        let spec = KernelSpec::gaussian(0.7).unwrap();
        let anchors = set(&[vec![0.0, 1.0], vec![1.0, 0.5], vec![-0.3, 0.2]], Origin::Real);
        let g = log_kde_backward(&spec, &anchors, &[0.1, 0.1], Some(1)).unwrap();
        assert_eq!(g.grad_anchors.row(1), &[0.0, 0.0]);
        assert_eq!(g.weights[1], 0.0);
    }

    #[test]
    fn nn_approx_single_anchor_is_exact() {
        let spec = KernelSpec::vmf(0.3).unwrap();
        let mut rng = Rng::seeded(5);
        let rows = random_unit_rows(&mut rng, 3, 4);
        let real = set(&rows[0..1], Origin::Real);
        let gen = set(&rows[1..2], Origin::Generated);
        let q = &rows[2];
        let approx = nn_grad_approx(&spec, &real, &gen, q).unwrap();
        let full_g = log_kde_backward(&spec, &gen, q, None).unwrap().grad_query;
        let full_r = log_kde_backward(&spec, &real, q, None).unwrap().grad_query;
        for k in 0..4 {
            assert!((approx[k] - (full_g[k] - full_r[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn nn_tie_break_lowest_index() {
        let spec = KernelSpec::vmf(1.0).unwrap();
        let a = unit(&[1.0, 1.0]);
        let b = unit(&[1.0, -1.0]);
        let anchors = set(&[a, b.clone(), b], Origin::Real);
        assert_eq!(nearest_anchor(&spec, &anchors, &[1.0, 0.0]).unwrap(), 0);
        let g = KernelSpec::gaussian(1.0).unwrap();
        let anchors = set(&[vec![2.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]], Origin::Real);
        assert_eq!(nearest_anchor(&g, &anchors, &[0.0, 0.0]).unwrap(), 1);
    }

    fn check_gradients(seed: u64, spec: KernelSpec, k: usize, n: usize, exclude: Option<usize>) {
        let mut rng = Rng::seeded(seed);
        let vmf = spec.requires_unit_norm();
        let raw: Vec<Vec<f64>> = (0..=n).map(|_| (0..k).map(|_| rng.normal()).collect()).collect();
        // Under vMF the oracle perturbs unnormalized inputs and the analytic
        // gradient is pulled back through the normalization.
        let prep = |v: &[f64]| if vmf { unit(v) } else { v.to_vec() };
        let pull = |v: &[f64], g: &[f64]| {
            if vmf {
                l2_normalize(v).unwrap().1.apply(g)
            } else {
                g.to_vec()
            }
        };
        let anchors_raw = &raw[..n];
        let q_raw = &raw[n];
        let anchors = set(&anchors_raw.iter().map(|r| prep(r)).collect::<Vec<_>>(), Origin::Real);
        let g = log_kde_backward(&spec, &anchors, &prep(q_raw), exclude).unwrap();
        let sum: f64 = g.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let eval = |a: &[Vec<f64>], q: &[f64]| {
            let s = set(&a.iter().map(|r| prep(r)).collect::<Vec<_>>(), Origin::Real);
            log_kde(&spec, &s, &prep(q), exclude).unwrap()
        };
        let mut numeric = finite_diff_grad(|q| eval(anchors_raw, q), q_raw, 1e-5).unwrap();
        let mut analytic = pull(q_raw, &g.grad_query);
        for i in 0..n {
            numeric.extend(
                finite_diff_grad(
                    |x| {
                        let mut a = anchors_raw.to_vec();
                        a[i] = x.to_vec();
                        eval(&a, q_raw)
                    },
                    &anchors_raw[i],
                    1e-5,
                )
                .unwrap(),
            );
            analytic.extend(pull(&anchors_raw[i], g.grad_anchors.row(i)));
        }
        let e = relative_error(&analytic, &numeric, 1e-8);
        assert!(e < 1e-5, "seed {seed} {spec:?} k {k} n {n} excl {exclude:?} err {e}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut case = 0u64;
        for &k in &[2usize, 3, 8] {
            for n in 1..=8usize {
                for spec in [KernelSpec::vmf(0.5).unwrap(), KernelSpec::gaussian(0.8).unwrap()] {
                    let exclude = if n > 1 && case % 2 == 0 { Some(case as usize % n) } else { None };
                    check_gradients(1000 + case, spec, k, n, exclude);
                    case += 1;
                }
            }
        }
        assert!(case >= 48);
        for seed in 0..60 {
            check_gradients(seed, KernelSpec::vmf(1.0).unwrap(), 3, 5, Some(2));
        }
    }

    proptest! {
        #[test]
        fn leave_one_out_equals_removal(seed in 0u64..10_000, n in 2usize..9, pick in 0usize..8) {
            let i = pick % n;
            let spec = KernelSpec::vmf(0.2).unwrap();
            let mut rng = Rng::seeded(seed);
            let rows = random_unit_rows(&mut rng, n + 1, 3);
            let anchors = set(&rows[..n], Origin::Real);
            let removed = AnchorSet::new(anchors.features().without_row(i), Origin::Real).unwrap();
            prop_assert_eq!(
                log_kde(&spec, &anchors, &rows[n], Some(i)).unwrap(),
                log_kde(&spec, &removed, &rows[n], None).unwrap()
            );
        }

        #[test]
        fn ratio_is_invariant_to_common_log_offset(
            real in proptest::collection::vec(-50.0f64..50.0, 1..10),
            gen in proptest::collection::vec(-50.0f64..50.0, 1..10),
            c in -600.0f64..600.0,
        ) {
            let base = log_mean_exp(&real).unwrap() - log_mean_exp(&gen).unwrap();
            let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
            let moved = log_mean_exp(&shift(&real)).unwrap() - log_mean_exp(&shift(&gen)).unwrap();
            prop_assert!((base - moved).abs() <= 1e-12, "drift {}", (base - moved).abs());
        }

        #[test]
        fn no_overflow_near_limit(v in proptest::collection::vec(-700.0f64..700.0, 1..30)) {
            prop_assert!(log_mean_exp(&v).unwrap().is_finite());
        }
    }
}
