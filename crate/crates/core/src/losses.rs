//! Discriminator and generator losses with analytic feature gradients.
//!
//! The kernel density losses hinge the KDE log-ratio
//! `r(x) = log p_real(phi(x)) - log p_gen(phi(x))`:
//!
//! ```text
//! L_D = mean_g max(0, 1 + r(x_g)) + mean_r max(0, 1 - r(x_r))
//! L_G = mean_g -r(x_g)
//! ```
//!
//! Every gradient is the total derivative with respect to each feature row,
//! including that row's role as an anchor of the KDEs evaluated at other
//! rows. Clamped hinge terms (and the kink itself) contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kde::{accumulate_log_kde_grad, log_kde_unchecked, AnchorSet, KernelSpec, Origin};
use crate::numerics::{sample_unit_direction, Matrix, Rng};

/// Weights of the combined objective `gamma * KDD + alpha * hinge +
/// lambda_jac * Jacobian`, plus the vMF temperature and the Jacobian step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub lambda_jac: f64,
    pub tau: f64,
    pub delta: f64,
}

/// The blessed Jacobian weight.
pub const LAMBDA_JAC_DEFAULT: f64 = 1e-5;

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 1.0,
            alpha: 0.0,
            lambda_jac: 0.0,
            tau: 1.0,
            delta: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn hinge() -> Self {
        LossWeights {
            gamma: 0.0,
            alpha: 1.0,
            ..LossWeights::default()
        }
    }

    pub fn kdd(tau: f64) -> Self {
        LossWeights {
            tau,
            ..LossWeights::default()
        }
    }

    pub fn joint(gamma: f64, tau: f64) -> Self {
        LossWeights {
            gamma,
            alpha: 1.0,
            tau,
            ..LossWeights::default()
        }
    }

    pub fn with_jacobian(self, lambda_jac: f64) -> Self {
        LossWeights { lambda_jac, ..self }
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        LossWeights { gamma, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("loss weights: {what}")));
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be a finite non-negative number");
        }
        if self.alpha != 0.0 && self.alpha != 1.0 {
            return bad("alpha must be 0 or 1");
        }
        if self.gamma + self.alpha <= 0.0 {
            return bad("at least one of gamma and alpha must be positive");
        }
        if !(self.lambda_jac >= 0.0) || !self.lambda_jac.is_finite() {
            return bad("lambda_jac must be a finite non-negative number");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau must be positive");
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return bad("delta must be positive");
        }
        Ok(())
    }

    pub fn kdd_active(&self) -> bool {
        self.gamma > 0.0
    }

    pub fn hinge_active(&self) -> bool {
        self.alpha > 0.0
    }

    pub fn jacobian_active(&self) -> bool {
        self.lambda_jac > 0.0
    }
}

/// Value and feature gradients of a batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// One row per real anchor (or real feature row).
    pub grad_real_features: Matrix,
    /// One row per generated anchor, or per detached query.
    pub grad_gen_features: Matrix,
    pub diagnostics: LossDiagnostics,
}

/// Per-query log-ratios and the derivative of the loss with respect to an
/// additive shift of each one (the chain-rule entry point for the
/// class-conditional term).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossDiagnostics {
    pub log_ratios_real: Vec<f64>,
    pub log_ratios_gen: Vec<f64>,
    pub dvalue_dratio_real: Vec<f64>,
    pub dvalue_dratio_gen: Vec<f64>,
    /// Anchor rows that served as evaluation points.
    pub evaluated_real_rows: Vec<usize>,
    pub evaluated_gen_rows: Vec<usize>,
}

/// Additive per-query log-ratio offsets (one entry per base row).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatioShift {
    pub real: Vec<f64>,
    pub gen: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HingeResult {
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

/// Discriminator hinge loss on raw scores.
pub fn hinge_d_loss(scores_real: &[f64], scores_fake: &[f64]) -> Result<HingeResult> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::Empty("hinge loss batch"));
    }
    let nr = scores_real.len() as f64;
    let nf = scores_fake.len() as f64;
    let mut value = 0.0;
    let mut grad_fake = Vec::with_capacity(scores_fake.len());
    for s in scores_fake {
        let t = 1.0 + s;
        if t > 0.0 {
            value += t / nf;
            grad_fake.push(1.0 / nf);
        } else {
            grad_fake.push(0.0);
        }
    }
    let mut grad_real = Vec::with_capacity(scores_real.len());
    for s in scores_real {
        let t = 1.0 - s;
        if t > 0.0 {
            value += t / nr;
            grad_real.push(-1.0 / nr);
        } else {
            grad_real.push(0.0);
        }
    }
    Ok(HingeResult {
        value,
        grad_real,
        grad_fake,
    })
}

/// Generator hinge loss `-mean(scores)`.
pub fn hinge_g_loss(scores_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores_fake.is_empty() {
        return Err(Error::Empty("hinge loss batch"));
    }
    let n = scores_fake.len() as f64;
    let value = -scores_fake.iter().sum::<f64>() / n;
    Ok((value, vec![-1.0 / n; scores_fake.len()]))
}

fn check_sets(spec: &KernelSpec, real: &AnchorSet, gen: &AnchorSet) -> Result<()> {
    spec.validated()?;
    if real.dim() != gen.dim() {
        return Err(shape_err(
            format!("generated features of dimension {}", real.dim()),
            format!("dimension {}", gen.dim()),
        ));
    }
    real.validate_for(spec)?;
    gen.validate_for(spec)
}

fn check_loo(set: &AnchorSet, leave_one_out: bool) -> Result<()> {
    if leave_one_out && set.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out needs at least 2 anchors per set, got {}",
            set.len()
        )));
    }
    Ok(())
}

fn check_shift(shift: Option<&RatioShift>, real: usize, gen: usize) -> Result<()> {
    if let Some(s) = shift {
        if (!s.real.is_empty() && s.real.len() != real) || (!s.gen.is_empty() && s.gen.len() != gen) {
            return Err(shape_err(
                format!("{real} real and {gen} generated shifts"),
                format!("{} and {}", s.real.len(), s.gen.len()),
            ));
        }
    }
    Ok(())
}

fn shift_at(v: Option<&Vec<f64>>, i: usize) -> f64 {
    v.and_then(|v| v.get(i)).copied().unwrap_or(0.0)
}

/// Discriminator loss on plain feature batches (no augmentation).
pub fn kdd_d_loss(
    real_features: &Matrix,
    gen_features: &Matrix,
    spec: &KernelSpec,
    leave_one_out: bool,
) -> Result<LossResult> {
    let real = AnchorSet::new(real_features.clone(), Origin::Real)?;
    let gen = AnchorSet::new(gen_features.clone(), Origin::Generated)?;
    kdd_d_loss_anchored(&real, &gen, spec, leave_one_out, None)
}

/// Discriminator loss evaluated at the base rows of both anchor sets.
///
/// With `leave_one_out`, base row `i` of a set is dropped from that set's
/// KDE when evaluating at row `i`; cross-set evaluations use every anchor.
pub fn kdd_d_loss_anchored(
    real: &AnchorSet,
    gen: &AnchorSet,
    spec: &KernelSpec,
    leave_one_out: bool,
    shift: Option<&RatioShift>,
) -> Result<LossResult> {
    check_sets(spec, real, gen)?;
    check_loo(real, leave_one_out)?;
    check_loo(gen, leave_one_out)?;
    check_shift(shift, real.base_len(), gen.base_len())?;
    let k = real.dim();
    let (rf, gf) = (real.features(), gen.features());
    let mut grad_real = Matrix::zeros(real.len(), k);
    let mut grad_gen = Matrix::zeros(gen.len(), k);
    let mut diag = LossDiagnostics::default();
    let mut scratch = Vec::new();
    let mut gq = vec![0.0; k];
    let mut value = 0.0;

    let ng = gen.base_len() as f64;
    for j in 0..gen.base_len() {
        let q = gf.row(j);
        let excl = leave_one_out.then_some(j);
        let ratio = log_kde_unchecked(spec, rf, q, None, &mut scratch)
            - log_kde_unchecked(spec, gf, q, excl, &mut scratch)
            + shift_at(shift.map(|s| &s.gen), j);
        let t = 1.0 + ratio;
        let d = if t > 0.0 {
            value += t / ng;
            1.0 / ng
        } else {
            0.0
        };
        if d != 0.0 {
            gq.fill(0.0);
            accumulate_log_kde_grad(spec, rf, q, None, d, &mut gq, &mut grad_real, &mut scratch);
            accumulate_log_kde_grad(spec, gf, q, excl, -d, &mut gq, &mut grad_gen, &mut scratch);
            grad_gen.row_mut(j).iter_mut().zip(&gq).for_each(|(g, v)| *g += v);
        }
        diag.log_ratios_gen.push(ratio);
        diag.dvalue_dratio_gen.push(d);
        diag.evaluated_gen_rows.push(j);
    }

    let nr = real.base_len() as f64;
    for i in 0..real.base_len() {
        let q = rf.row(i);
        let excl = leave_one_out.then_some(i);
        let ratio = log_kde_unchecked(spec, rf, q, excl, &mut scratch)
            - log_kde_unchecked(spec, gf, q, None, &mut scratch)
            + shift_at(shift.map(|s| &s.real), i);
        let t = 1.0 - ratio;
        let d = if t > 0.0 {
            value += t / nr;
            -1.0 / nr
        } else {
            0.0
        };
        if d != 0.0 {
            gq.fill(0.0);
            accumulate_log_kde_grad(spec, rf, q, excl, d, &mut gq, &mut grad_real, &mut scratch);
            accumulate_log_kde_grad(spec, gf, q, None, -d, &mut gq, &mut grad_gen, &mut scratch);
            grad_real.row_mut(i).iter_mut().zip(&gq).for_each(|(g, v)| *g += v);
        }
        diag.log_ratios_real.push(ratio);
        diag.dvalue_dratio_real.push(d);
        diag.evaluated_real_rows.push(i);
    }

    Ok(LossResult {
        value,
        grad_real_features: grad_real,
        grad_gen_features: grad_gen,
        diagnostics: diag,
    })
}

/// Where the generator loss is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum GenQueries<'a> {
    /// At the base rows of the generated anchor set. Gradients cover every
    /// generated anchor row, so each query also feels its effect on the
    /// other queries' generated-density estimates.
    Anchors,
    /// At separate points that are not members of either anchor set.
    /// Both anchor sets are constants; gradients are per query.
    Detached(&'a Matrix),
}

/// Generator loss `mean_q -(log p_real(q) - log p_gen(q))`.
///
/// Real anchors are constants. `grad_real_features` is returned as zeros.
pub fn kdd_g_loss(
    queries: GenQueries<'_>,
    real_anchors: &AnchorSet,
    gen_anchors: &AnchorSet,
    spec: &KernelSpec,
    leave_one_out: bool,
    shift: Option<&[f64]>,
) -> Result<LossResult> {
    check_sets(spec, real_anchors, gen_anchors)?;
    let k = real_anchors.dim();
    let (rf, gf) = (real_anchors.features(), gen_anchors.features());
    let mut sink = Matrix::zeros(real_anchors.len(), k);
    let mut scratch = Vec::new();
    let mut gq = vec![0.0; k];
    let mut diag = LossDiagnostics::default();
    let mut value = 0.0;

    let (query_mat, same_set) = match queries {
        GenQueries::Anchors => (gf, true),
        GenQueries::Detached(q) => {
            if q.cols() != k {
                return Err(shape_err(format!("queries of dimension {k}"), format!("{}", q.cols())));
            }
            for (i, row) in q.iter_rows().enumerate() {
                spec.check_point(row, i)?;
            }
            (q, false)
        }
    };
    let n_queries = if same_set { gen_anchors.base_len() } else { query_mat.rows() };
    if n_queries == 0 {
        return Err(Error::Empty("generator query batch"));
    }
    if same_set {
        check_loo(gen_anchors, leave_one_out)?;
    }
    if let Some(s) = shift {
        if s.len() != n_queries {
            return Err(shape_err(format!("{n_queries} shifts"), format!("{}", s.len())));
        }
    }
    let mut grad_gen = if same_set {
        Matrix::zeros(gen_anchors.len(), k)
    } else {
        Matrix::zeros(n_queries, k)
    };
    let mut anchor_sink = Matrix::zeros(if same_set { 0 } else { gen_anchors.len() }, k);

    let n = n_queries as f64;
    let d = -1.0 / n;
    for j in 0..n_queries {
        let q = query_mat.row(j);
        let excl = (same_set && leave_one_out).then_some(j);
        gq.fill(0.0);
        let lr = accumulate_log_kde_grad(spec, rf, q, None, d, &mut gq, &mut sink, &mut scratch);
        let lg = if same_set {
            accumulate_log_kde_grad(spec, gf, q, excl, -d, &mut gq, &mut grad_gen, &mut scratch)
        } else {
            accumulate_log_kde_grad(spec, gf, q, None, -d, &mut gq, &mut anchor_sink, &mut scratch)
        };
        let ratio = lr - lg + shift.map_or(0.0, |s| s[j]);
        value -= ratio / n;
        grad_gen.row_mut(j).iter_mut().zip(&gq).for_each(|(g, v)| *g += v);
        diag.log_ratios_gen.push(ratio);
        diag.dvalue_dratio_gen.push(d);
        diag.evaluated_gen_rows.push(j);
    }

    Ok(LossResult {
        value,
        grad_real_features: Matrix::zeros(real_anchors.len(), k),
        grad_gen_features: grad_gen,
        diagnostics: diag,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTerm {
    pub value: f64,
    pub grad_features: Vec<f64>,
    pub grad_embedding: Matrix,
}

/// Class-conditional log-ratio `y^T V phi` for a one-hot label `y`.
pub fn conditional_logratio(
    label_onehot: &[f64],
    embedding: &Matrix,
    features: &[f64],
) -> Result<ConditionalTerm> {
    let ones = label_onehot.iter().filter(|&&v| v == 1.0).count();
    let zeros = label_onehot.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != label_onehot.len() {
        return Err(Error::InvalidArgument("label is not one-hot".into()));
    }
    let class = label_onehot.iter().position(|&v| v == 1.0).unwrap_or(0);
    conditional_logratio_index(class, embedding, features)
}

pub fn conditional_logratio_index(
    class: usize,
    embedding: &Matrix,
    features: &[f64],
) -> Result<ConditionalTerm> {
    if class >= embedding.rows() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} embeddings",
            embedding.rows()
        )));
    }
    if features.len() != embedding.cols() {
        return Err(shape_err(
            format!("features of dimension {}", embedding.cols()),
            format!("{}", features.len()),
        ));
    }
    let row = embedding.row(class);
    let value = crate::numerics::dot(row, features);
    let mut grad_embedding = Matrix::zeros(embedding.rows(), embedding.cols());
    grad_embedding.row_mut(class).copy_from_slice(features);
    Ok(ConditionalTerm {
        value,
        grad_features: row.to_vec(),
        grad_embedding,
    })
}

/// Finite-difference Jacobian penalty and the upstream gradients it sends
/// into both evaluations of the unnormalized feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReg {
    pub value: f64,
    pub directions: Matrix,
    /// `x + delta * dx`, the inputs of the second evaluation.
    pub perturbed_inputs: Matrix,
    /// d value / d phi_un(x).
    pub grad_base_output: Matrix,
    /// d value / d phi_un(x + delta * dx).
    pub grad_perturbed_output: Matrix,
}

/// `mean_x | |phi_un(x + delta dx) - phi_un(x)|_2 / delta - 1 |` with one
/// fresh unit direction `dx` per row.
pub fn jacobian_reg<F>(phi_un: F, batch: &Matrix, delta: f64, rng: &mut Rng) -> Result<JacobianReg>
where
    F: FnMut(&Matrix) -> Result<Matrix>,
{
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    let mut dirs = Vec::with_capacity(batch.rows() * batch.cols());
    for _ in 0..batch.rows() {
        dirs.extend(sample_unit_direction(rng, batch.cols())?);
    }
    let directions = Matrix::from_vec_unchecked(batch.rows(), batch.cols(), dirs);
    jacobian_reg_with_directions(phi_un, batch, &directions, delta)
}

pub fn jacobian_reg_with_directions<F>(
    mut phi_un: F,
    batch: &Matrix,
    directions: &Matrix,
    delta: f64,
) -> Result<JacobianReg>
where
    F: FnMut(&Matrix) -> Result<Matrix>,
{
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    if batch.is_empty() {
        return Err(Error::Empty("jacobian regularizer batch"));
    }
    if directions.shape() != batch.shape() {
        return Err(shape_err(format!("{:?}", batch.shape()), format!("{:?}", directions.shape())));
    }
    let mut perturbed = batch.clone();
    perturbed.add_scaled(directions, delta)?;
    let base = phi_un(batch)?;
    let moved = phi_un(&perturbed)?;
    if base.shape() != moved.shape() || base.rows() != batch.rows() {
        return Err(shape_err(format!("{:?}", base.shape()), format!("{:?}", moved.shape())));
    }
    let n = batch.rows() as f64;
    let mut value = 0.0;
    let mut grad_base = Matrix::zeros(base.rows(), base.cols());
    let mut grad_moved = Matrix::zeros(base.rows(), base.cols());
    for i in 0..base.rows() {
        let diff: Vec<f64> = moved.row(i).iter().zip(base.row(i)).map(|(a, b)| a - b).collect();
        let len = crate::numerics::norm(&diff);
        let r = len / delta - 1.0;
        value += r.abs() / n;
        if r != 0.0 && len > 0.0 {
            let s = r.signum() / (n * delta * len);
            for (k, d) in diff.iter().enumerate() {
                grad_moved.row_mut(i)[k] = s * d;
                grad_base.row_mut(i)[k] = -s * d;
            }
        }
    }
    Ok(JacobianReg {
        value,
        directions: directions.clone(),
        perturbed_inputs: perturbed,
        grad_base_output: grad_base,
        grad_perturbed_output: grad_moved,
    })
}

/// Loss parts available for combination.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts<'a> {
    pub kdd: Option<&'a LossResult>,
    pub hinge: Option<&'a LossResult>,
    pub jac: Option<f64>,
}

/// `gamma * kdd + alpha * hinge + lambda_jac * jac`, with feature gradients
/// combined the same way. Parts with zero weight are ignored.
pub fn joint_loss(parts: &LossParts<'_>, weights: &LossWeights) -> Result<LossResult> {
    let need = |active: bool, present: bool, name: &str| {
        if active && !present {
            Err(Error::InvalidArgument(format!("{name} part is required by the loss weights")))
        } else {
            Ok(())
        }
    };
    need(weights.kdd_active(), parts.kdd.is_some(), "kdd")?;
    need(weights.hinge_active(), parts.hinge.is_some(), "hinge")?;
    need(weights.jacobian_active(), parts.jac.is_some(), "jacobian")?;

    let mut terms: Vec<(f64, &LossResult)> = Vec::new();
    if weights.kdd_active() {
        terms.extend(parts.kdd.map(|p| (weights.gamma, p)));
    }
    if weights.hinge_active() {
        terms.extend(parts.hinge.map(|p| (weights.alpha, p)));
    }
    let Some(&(w0, first)) = terms.first() else {
        return Err(Error::InvalidArgument("no active loss part".into()));
    };
    let mut out = first.clone();
    if w0 != 1.0 {
        out.value *= w0;
        out.grad_real_features.scale(w0);
        out.grad_gen_features.scale(w0);
    }
    for &(w, part) in &terms[1..] {
        out.value += w * part.value;
        out.grad_real_features.add_scaled(&part.grad_real_features, w)?;
        out.grad_gen_features.add_scaled(&part.grad_gen_features, w)?;
    }
    if weights.jacobian_active() {
        out.value += weights.lambda_jac * parts.jac.unwrap_or(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_grad, l2_normalize, relative_error};

    fn unit_rows(rng: &mut Rng, n: usize, k: usize) -> Matrix {
        let mut m = Matrix::zeros(n, k);
        for i in 0..n {
            let v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            m.row_mut(i).copy_from_slice(&l2_normalize(&v).unwrap().0);
        }
        m
    }

    #[test]
    fn hinge_examples() {
        let r = hinge_d_loss(&[1.0, 1.0], &[-1.0, -1.0]).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(hinge_d_loss(&[0.0], &[0.0]).unwrap().value, 2.0);
        let r = hinge_d_loss(&[2.0], &[-3.0]).unwrap();
        assert_eq!((r.value, r.grad_real[0], r.grad_fake[0]), (0.0, 0.0, 0.0));
        assert!(hinge_d_loss(&[], &[0.0]).is_err());

        assert_eq!(hinge_g_loss(&[0.0, 0.0]).unwrap().0, 0.0);
        let (v, g) = hinge_g_loss(&[1.0, 3.0]).unwrap();
        assert_eq!(v, -2.0);
        assert_eq!(g, vec![-0.5, -0.5]);
        assert!(hinge_g_loss(&[]).is_err());
    }

    #[test]
    fn kdd_d_identical_batches_is_two() {
        let mut rng = Rng::seeded(3);
        let f = unit_rows(&mut rng, 5, 3);
        let spec = KernelSpec::vmf(1.0).unwrap();
        let r = kdd_d_loss(&f, &f, &spec, false).unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
        assert!(r.diagnostics.log_ratios_gen.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn kdd_d_loo_requires_two_rows() {
        let mut rng = Rng::seeded(3);
        let a = unit_rows(&mut rng, 1, 3);
        let b = unit_rows(&mut rng, 3, 3);
        let spec = KernelSpec::vmf(1.0).unwrap();
        assert!(kdd_d_loss(&a, &b, &spec, true).is_err());
        assert!(kdd_d_loss(&a, &b, &spec, false).is_ok());
        let c = unit_rows(&mut rng, 3, 2);
        assert!(matches!(kdd_d_loss(&b, &c, &spec, false), Err(Error::ShapeMismatch { .. })));
        let mut off = b.clone();
        off.row_mut(0)[0] += 0.1;
        assert!(matches!(kdd_d_loss(&off, &b, &spec, false), Err(Error::NotUnitNorm { .. })));
    }

    #[test]
    fn clamped_real_term_has_no_gradient() {
        // Real points sit on top of each other far from the generated ones:
        // their log-ratio exceeds 1 and the real terms clamp to zero.
        let spec = KernelSpec::gaussian(0.5).unwrap();
        let real = Matrix::from_rows(&[[0.0, 0.0], [0.01, 0.0]]).unwrap();
        let gen = Matrix::from_rows(&[[3.0, 0.0], [3.0, 0.1]]).unwrap();
        let r = kdd_d_loss(&real, &gen, &spec, false).unwrap();
        assert!(r.diagnostics.log_ratios_real.iter().all(|&v| v >= 1.0));
        assert!(r.diagnostics.dvalue_dratio_real.iter().all(|&d| d == 0.0));
        // Generated terms are clamped too (ratio <= -1), so nothing moves.
        assert!(r.diagnostics.log_ratios_gen.iter().all(|&v| v <= -1.0));
        assert_eq!(r.value, 0.0);
        assert!(r.grad_real_features.as_slice().iter().all(|v| *v == 0.0));
        assert!(r.grad_gen_features.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kdd_g_closed_forms() {
        let spec = KernelSpec::vmf(1.0).unwrap();
        let mut rng = Rng::seeded(9);
        let f = unit_rows(&mut rng, 4, 3);
        let set = AnchorSet::new(f.clone(), Origin::Real).unwrap();
        let gen = AnchorSet::new(f, Origin::Generated).unwrap();
        let r = kdd_g_loss(GenQueries::Anchors, &set, &gen, &spec, false, None).unwrap();
        assert!(r.value.abs() < 1e-12);

        let rows = unit_rows(&mut rng, 2, 3);
        let real = AnchorSet::new(rows.slice_rows(0, 1), Origin::Real).unwrap();
        let gen = AnchorSet::new(rows.slice_rows(1, 2), Origin::Generated).unwrap();
        let r = kdd_g_loss(GenQueries::Anchors, &real, &gen, &spec, false, None).unwrap();
        let expected = 1.0 - dot(rows.row(0), rows.row(1));
        assert!((r.value - expected).abs() < 1e-12);
    }

    #[test]
    fn force_decomposition_moves_toward_real() {
        let spec = KernelSpec::vmf(0.5).unwrap();
        let mut rng = Rng::seeded(21);
        for _ in 0..20 {
            let rows = unit_rows(&mut rng, 2, 3);
            let (r, g) = (rows.row(0), rows.row(1));
            let real = AnchorSet::new(rows.slice_rows(0, 1), Origin::Real).unwrap();
            let gen = AnchorSet::new(rows.slice_rows(1, 2), Origin::Generated).unwrap();
            let res = kdd_g_loss(GenQueries::Anchors, &real, &gen, &spec, false, None).unwrap();
            let toward: Vec<f64> = r.iter().zip(g).map(|(a, b)| a - b).collect();
            assert!(dot(res.grad_gen_features.row(0), &toward) < 0.0);
            let q = rows.slice_rows(1, 2);
            let res = kdd_g_loss(GenQueries::Detached(&q), &real, &gen, &spec, false, None).unwrap();
            assert!(dot(res.grad_gen_features.row(0), &toward) < 0.0);
        }
    }

    #[test]
    fn conditional_examples() {
        let v = Matrix::zeros(3, 2);
        assert_eq!(conditional_logratio(&[0.0, 1.0, 0.0], &v, &[0.3, 0.4]).unwrap().value, 0.0);
        let u = [0.6, 0.8];
        let mut v = Matrix::zeros(3, 2);
        v.row_mut(2).copy_from_slice(&u);
        let t = conditional_logratio(&[0.0, 0.0, 1.0], &v, &u).unwrap();
        assert!((t.value - 1.0).abs() < 1e-15);
        assert!(conditional_logratio(&[1.0, 1.0, 0.0], &v, &u).is_err());
        assert!(conditional_logratio(&[0.5, 0.0, 0.0], &v, &u).is_err());
    }

    #[test]
    fn conditional_gradients_match_finite_differences() {
        let mut rng = Rng::seeded(4);
        for _ in 0..20 {
            let emb: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
            let emb = Matrix::from_vec(4, 3, emb).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let c = rng.below(4);
            let t = conditional_logratio_index(c, &emb, &x).unwrap();
            let num = finite_diff_grad(|x| conditional_logratio_index(c, &emb, x).unwrap().value, &x, 1e-5)
                .unwrap();
            assert!(relative_error(&t.grad_features, &num, 1e-8) < 1e-6);
            let num = finite_diff_grad(
                |e| {
                    let m = Matrix::from_vec(4, 3, e.to_vec()).unwrap();
                    conditional_logratio_index(c, &m, &x).unwrap().value
                },
                emb.as_slice(),
                1e-5,
            )
            .unwrap();
            assert!(relative_error(t.grad_embedding.as_slice(), &num, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn jacobian_examples() {
        let mut rng = Rng::seeded(8);
        let x = Matrix::from_vec(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let id = jacobian_reg(|b| Ok(b.clone()), &x, 1e-3, &mut rng).unwrap();
        assert!(id.value.abs() < 1e-9);
        let double = jacobian_reg(
            |b| {
                let mut m = b.clone();
                m.scale(2.0);
                Ok(m)
            },
            &x,
            1e-3,
            &mut rng,
        )
        .unwrap();
        assert!((double.value - 1.0).abs() < 1e-9);
        assert!(jacobian_reg(|b| Ok(b.clone()), &x, 0.0, &mut rng).is_err());
        assert!(jacobian_reg(|b| Ok(b.clone()), &x, -1e-3, &mut rng).is_err());
    }

    /// Gram-Schmidt on the columns of a random `rows x cols` matrix.
    fn orthonormal_columns(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < cols {
            let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
            for u in &q {
                let p = dot(u, &v);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            q.push(l2_normalize(&v).unwrap().0);
        }
        let mut m = Matrix::zeros(rows, cols);
        for (c, col) in q.iter().enumerate() {
            for r in 0..rows {
                m.set(r, c, col[r]);
            }
        }
        m
    }

    fn apply_linear(q: &Matrix, b: &Matrix) -> Matrix {
        // rows of b are inputs of dimension q.cols()
        let mut out = Matrix::zeros(b.rows(), q.rows());
        for i in 0..b.rows() {
            for r in 0..q.rows() {
                out.set(i, r, dot(q.row(r), b.row(i)));
            }
        }
        out
    }

    #[test]
    fn jacobian_zero_for_isometric_linear_map() {
        let mut rng = Rng::seeded(10);
        // 5 x 3 with orthonormal columns: an isometric embedding of R^3 in R^5.
        let q = orthonormal_columns(&mut rng, 5, 3);
        let x = Matrix::from_vec(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let r = jacobian_reg(|b| Ok(apply_linear(&q, b)), &x, 1e-3, &mut rng).unwrap();
        assert!(r.value < 1e-9, "{}", r.value);
        // Orthonormal rows (3 x 5) shrink off-row-space directions.
        let qt = orthonormal_columns(&mut rng, 5, 3);
        let mut rows = Matrix::zeros(3, 5);
        for i in 0..3 {
            for j in 0..5 {
                rows.set(i, j, qt.get(j, i));
            }
        }
        let x = Matrix::from_vec(6, 5, (0..30).map(|_| rng.normal()).collect()).unwrap();
        let r = jacobian_reg(|b| Ok(apply_linear(&rows, b)), &x, 1e-3, &mut rng).unwrap();
        assert!(r.value > 1e-3);
    }

    #[test]
    fn joint_reductions() {
        let mut rng = Rng::seeded(12);
        let real = unit_rows(&mut rng, 4, 3);
        let gen = unit_rows(&mut rng, 4, 3);
        let spec = KernelSpec::vmf(1.0).unwrap();
        let kdd = kdd_d_loss(&real, &gen, &spec, true).unwrap();
        let mut hinge = kdd.clone();
        hinge.value = 0.37;
        hinge.grad_real_features.scale(-0.5);
        let parts = LossParts {
            kdd: Some(&kdd),
            hinge: Some(&hinge),
            jac: Some(0.2),
        };
        let h = joint_loss(&parts, &LossWeights::hinge()).unwrap();
        assert_eq!(h, hinge);
        let k = joint_loss(&parts, &LossWeights::kdd(1.0)).unwrap();
        assert_eq!(k, kdd);
        let both = joint_loss(&parts, &LossWeights::joint(1.0, 1.0)).unwrap();
        assert!((both.value - (kdd.value + hinge.value)).abs() < 1e-12);
        let with_jac = joint_loss(&parts, &LossWeights::joint(1.0, 1.0).with_jacobian(1e-5)).unwrap();
        assert!((with_jac.value - both.value - 2e-6).abs() < 1e-15);
        let missing = LossParts { kdd: Some(&kdd), ..Default::default() };
        assert!(joint_loss(&missing, &LossWeights::hinge()).is_err());
    }

    #[test]
    fn joint_is_linear_in_gamma() {
        let mut rng = Rng::seeded(13);
        let spec = KernelSpec::vmf(0.5).unwrap();
        let kdd = kdd_d_loss(&unit_rows(&mut rng, 3, 2), &unit_rows(&mut rng, 3, 2), &spec, false).unwrap();
        let parts = LossParts { kdd: Some(&kdd), ..Default::default() };
        for (g1, g2) in [(0.3, 0.7), (1.0, 2.5), (0.01, 4.0)] {
            let a = joint_loss(&parts, &LossWeights::kdd(0.5).with_gamma(g1)).unwrap().value;
            let b = joint_loss(&parts, &LossWeights::kdd(0.5).with_gamma(g2)).unwrap().value;
            let c = joint_loss(&parts, &LossWeights::kdd(0.5).with_gamma(g1 + g2)).unwrap().value;
            assert!((c - a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { gamma: 0.0, alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { alpha: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::hinge().with_jacobian(LAMBDA_JAC_DEFAULT).validate().is_ok());
    }
}
