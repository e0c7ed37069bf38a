//! Analytic gradients of every loss against central finite differences on
//! seeded random cases, plus the nearest-anchor approximation against the
//! full-sum gradient.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{log_kde_backward, nn_grad_approx, AnchorSet, KernelSpec, Origin};
use crate::losses::{
    conditional_logratio_index, hinge_d_loss, hinge_g_loss, jacobian_reg_with_directions, joint_loss,
    kdd_d_loss_anchored, kdd_g_loss, GenQueries, LossDiagnostics, LossParts, LossResult, LossWeights,
};
use crate::models::{Activation, Mlp};
use crate::numerics::{
    dot, finite_diff_grad, l2_normalize, norm, relative_error, sample_unit_direction, Matrix, Rng,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub cases: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    /// Temperature of the nearest-anchor comparison.
    pub nn_tau: f64,
    pub nn_min_cosine: f64,
    /// Share of nearest-anchor cases that must reach `nn_min_cosine`.
    pub nn_min_pass: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            cases: 100,
            fd_step: 1e-5,
            tolerance: 1e-5,
            nn_tau: 0.01,
            nn_min_cosine: 0.99,
            nn_min_pass: 0.95,
        }
    }
}

/// One line of the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub cases: usize,
    /// Largest relative error; for the cosine check, the smallest cosine.
    pub worst: f64,
    pub threshold: f64,
    pub failures: usize,
    pub passed: bool,
}

pub const REPORT_COLUMNS: [&str; 6] = ["check", "cases", "worst", "threshold", "failures", "passed"];

pub fn write_report<W: Write>(out: W, rows: &[CheckRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A differentiable case: parameter vector, function and analytic gradient.
struct Case {
    params: Vec<f64>,
    f: Box<dyn FnMut(&[f64]) -> Result<f64>>,
    analytic: Vec<f64>,
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn random_kernel(rng: &mut Rng, vmf: bool) -> Result<KernelSpec> {
    if vmf {
        KernelSpec::vmf(uniform(rng, 0.3, 2.0))
    } else {
        KernelSpec::gaussian(uniform(rng, 0.5, 2.0))
    }
}

/// Raw rows, normalized when the kernel needs unit features.
fn features(raw: &[f64], k: usize, unit: bool) -> Result<Matrix> {
    let mut m = Matrix::from_vec(raw.len() / k, k, raw.to_vec())?;
    if unit {
        for i in 0..m.rows() {
            let (u, _) = l2_normalize(m.row(i))?;
            m.row_mut(i).copy_from_slice(&u);
        }
    }
    Ok(m)
}

/// Pulls feature gradients back through the row normalization.
fn raw_grad(raw: &[f64], k: usize, unit: bool, grad: &Matrix) -> Result<Vec<f64>> {
    if !unit {
        return Ok(grad.as_slice().to_vec());
    }
    let mut out = Vec::with_capacity(raw.len());
    for (i, row) in raw.chunks(k).enumerate() {
        let (_, back) = l2_normalize(row)?;
        out.extend(back.apply(grad.row(i)));
    }
    Ok(out)
}

fn anchor_set(feats: Matrix, origin: Origin, base: usize, rng: &mut Rng) -> Result<AnchorSet> {
    let aug: Vec<usize> = (base..feats.rows()).map(|_| rng.below(base)).collect();
    AnchorSet::with_augmentation(feats, origin, base, aug)
}

fn hinge_d_case(rng: &mut Rng) -> Result<Case> {
    let (nr, ng) = (between(rng, 1, 8), between(rng, 1, 8));
    let params: Vec<f64> = normals(rng, nr + ng).iter().map(|v| 2.0 * v).collect();
    let h = hinge_d_loss(&params[..nr], &params[nr..])?;
    let analytic = [h.grad_real, h.grad_fake].concat();
    Ok(Case {
        params,
        f: Box::new(move |p| Ok(hinge_d_loss(&p[..nr], &p[nr..])?.value)),
        analytic,
    })
}

fn hinge_g_case(rng: &mut Rng) -> Result<Case> {
    let n = between(rng, 1, 8);
    let params: Vec<f64> = normals(rng, n).iter().map(|v| 2.0 * v).collect();
    let (_, analytic) = hinge_g_loss(&params)?;
    Ok(Case {
        params,
        f: Box::new(|p| Ok(hinge_g_loss(p)?.0)),
        analytic,
    })
}

fn kdd_d_case(rng: &mut Rng, vmf: bool) -> Result<Case> {
    let k = between(rng, 2, 5);
    let (br, bg) = (between(rng, 2, 5), between(rng, 2, 5));
    let (ar, ag) = (between(rng, 0, 3), between(rng, 0, 3));
    let loo = rng.below(2) == 1;
    let spec = random_kernel(rng, vmf)?;
    let n_r = (br + ar) * k;
    let raw = normals(rng, n_r + (bg + ag) * k);
    let aug_r: Vec<usize> = (0..ar).map(|_| rng.below(br)).collect();
    let aug_g: Vec<usize> = (0..ag).map(|_| rng.below(bg)).collect();
    let build = move |p: &[f64]| -> Result<LossResult> {
        let real = AnchorSet::with_augmentation(features(&p[..n_r], k, vmf)?, Origin::Real, br, aug_r.clone())?;
        let gen = AnchorSet::with_augmentation(features(&p[n_r..], k, vmf)?, Origin::Generated, bg, aug_g.clone())?;
        kdd_d_loss_anchored(&real, &gen, &spec, loo, None)
    };
    let res = build(&raw)?;
    let analytic = [
        raw_grad(&raw[..n_r], k, vmf, &res.grad_real_features)?,
        raw_grad(&raw[n_r..], k, vmf, &res.grad_gen_features)?,
    ]
    .concat();
    Ok(Case {
        params: raw,
        f: Box::new(move |p| Ok(build(p)?.value)),
        analytic,
    })
}

fn kdd_g_case(rng: &mut Rng, vmf: bool, detached: bool) -> Result<Case> {
    let k = between(rng, 2, 5);
    let (nr, bg, ag) = (between(rng, 1, 6), between(rng, 2, 5), between(rng, 0, 3));
    let loo = rng.below(2) == 1;
    let spec = random_kernel(rng, vmf)?;
    let real = AnchorSet::new(features(&normals(rng, nr * k), k, vmf)?, Origin::Real)?;
    let gen_fixed = anchor_set(features(&normals(rng, (bg + ag) * k), k, vmf)?, Origin::Generated, bg, rng)?;
    let nq = between(rng, 1, 4);
    let aug: Vec<usize> = (0..ag).map(|_| rng.below(bg)).collect();
    let raw = normals(rng, if detached { nq * k } else { (bg + ag) * k });
    let build = move |p: &[f64]| -> Result<LossResult> {
        let f = features(p, k, vmf)?;
        if detached {
            kdd_g_loss(GenQueries::Detached(&f), &real, &gen_fixed, &spec, loo, None)
        } else {
            let gen = AnchorSet::with_augmentation(f, Origin::Generated, bg, aug.clone())?;
            kdd_g_loss(GenQueries::Anchors, &real, &gen, &spec, loo, None)
        }
    };
    let res = build(&raw)?;
    let analytic = raw_grad(&raw, k, vmf, &res.grad_gen_features)?;
    Ok(Case {
        params: raw,
        f: Box::new(move |p| Ok(build(p)?.value)),
        analytic,
    })
}

fn conditional_case(rng: &mut Rng) -> Result<Case> {
    let (k, c) = (between(rng, 2, 6), between(rng, 2, 5));
    let class = rng.below(c);
    let params = normals(rng, k + c * k);
    let split = move |p: &[f64]| -> Result<(Vec<f64>, Matrix)> { Ok((p[..k].to_vec(), Matrix::from_vec(c, k, p[k..].to_vec())?)) };
    let (phi, v) = split(&params)?;
    let t = conditional_logratio_index(class, &v, &phi)?;
    let analytic = [t.grad_features, t.grad_embedding.into_vec()].concat();
    Ok(Case {
        params,
        f: Box::new(move |p| {
            let (phi, v) = split(p)?;
            Ok(conditional_logratio_index(class, &v, &phi)?.value)
        }),
        analytic,
    })
}

fn jacobian_case(rng: &mut Rng) -> Result<Case> {
    let (d, h, k, n) = (between(rng, 1, 4), between(rng, 2, 6), between(rng, 1, 4), between(rng, 1, 5));
    let act = if rng.below(2) == 0 { Activation::Tanh } else { Activation::LeakyRelu };
    let mlp = Mlp::new(&[d, h, k], act, rng)?;
    let batch = Matrix::from_vec(n, d, normals(rng, n * d))?;
    let mut dirs = Vec::with_capacity(n * d);
    for _ in 0..n {
        dirs.extend(sample_unit_direction(rng, d)?);
    }
    let dirs = Matrix::from_vec(n, d, dirs)?;
    let delta = uniform(rng, 1e-3, 1e-1);
    let params = mlp.params().to_vec();

    let reg = jacobian_reg_with_directions(|x| mlp.forward(x).map(|(o, _)| o), &batch, &dirs, delta)?;
    let (_, t0) = mlp.forward(&batch)?;
    let (_, t1) = mlp.forward(&reg.perturbed_inputs)?;
    let (g0, _) = mlp.backward(&t0, &reg.grad_base_output)?;
    let (g1, _) = mlp.backward(&t1, &reg.grad_perturbed_output)?;
    let analytic = g0.iter().zip(&g1).map(|(a, b)| a + b).collect();

    let mut probe = mlp.clone();
    Ok(Case {
        params,
        f: Box::new(move |p| {
            probe.set_params(p)?;
            let m = &probe;
            Ok(jacobian_reg_with_directions(|x| m.forward(x).map(|(o, _)| o), &batch, &dirs, delta)?.value)
        }),
        analytic,
    })
}

fn joint_case(rng: &mut Rng) -> Result<Case> {
    let vmf = rng.below(2) == 1;
    let k = between(rng, 2, 5);
    let (nr, ng) = (between(rng, 2, 5), between(rng, 2, 5));
    let spec = random_kernel(rng, vmf)?;
    let loo = rng.below(2) == 1;
    let theta = normals(rng, k);
    let weights = LossWeights {
        gamma: uniform(rng, 0.1, 2.0),
        alpha: rng.below(2) as f64,
        lambda_jac: uniform(rng, 0.0, 1e-3),
        ..LossWeights::default()
    };
    let jac = uniform(rng, 0.0, 1.0);
    let n_r = nr * k;
    let raw = normals(rng, (nr + ng) * k);
    let build = move |p: &[f64]| -> Result<LossResult> {
        let fr = features(&p[..n_r], k, vmf)?;
        let fg = features(&p[n_r..], k, vmf)?;
        let kdd = kdd_d_loss_anchored(
            &AnchorSet::new(fr.clone(), Origin::Real)?,
            &AnchorSet::new(fg.clone(), Origin::Generated)?,
            &spec,
            loo,
            None,
        )?;
        let sr: Vec<f64> = fr.iter_rows().map(|r| dot(r, &theta)).collect();
        let sg: Vec<f64> = fg.iter_rows().map(|r| dot(r, &theta)).collect();
        let h = hinge_d_loss(&sr, &sg)?;
        let outer = |ds: &[f64]| {
            let mut g = Matrix::zeros(ds.len(), k);
            for (i, d) in ds.iter().enumerate() {
                g.row_mut(i).iter_mut().zip(&theta).for_each(|(o, t)| *o = d * t);
            }
            g
        };
        let hinge = LossResult {
            value: h.value,
            grad_real_features: outer(&h.grad_real),
            grad_gen_features: outer(&h.grad_fake),
            diagnostics: LossDiagnostics::default(),
        };
        let parts = LossParts {
            kdd: Some(&kdd),
            hinge: Some(&hinge),
            jac: Some(jac),
        };
        joint_loss(&parts, &weights)
    };
    let res = build(&raw)?;
    let analytic = [
        raw_grad(&raw[..n_r], k, vmf, &res.grad_real_features)?,
        raw_grad(&raw[n_r..], k, vmf, &res.grad_gen_features)?,
    ]
    .concat();
    Ok(Case {
        params: raw,
        f: Box::new(move |p| Ok(build(p)?.value)),
        analytic,
    })
}

type CaseGen = fn(&mut Rng) -> Result<Case>;

const FD_CHECKS: [(&str, CaseGen); 11] = [
    ("hinge_d", hinge_d_case),
    ("hinge_g", hinge_g_case),
    ("kdd_d_vmf", |r| kdd_d_case(r, true)),
    ("kdd_d_gaussian", |r| kdd_d_case(r, false)),
    ("kdd_g_vmf", |r| kdd_g_case(r, true, false)),
    ("kdd_g_gaussian", |r| kdd_g_case(r, false, false)),
    ("kdd_g_detached_vmf", |r| kdd_g_case(r, true, true)),
    ("kdd_g_detached_gaussian", |r| kdd_g_case(r, false, true)),
    ("conditional", conditional_case),
    ("jacobian", jacobian_case),
    ("joint", joint_case),
];

fn case_rng(root: &Rng, check: usize, case: usize) -> Rng {
    root.fork(((check as u64) << 32) | case as u64)
}

fn random_unit_set(rng: &mut Rng, n: usize, k: usize, origin: Origin) -> Result<AnchorSet> {
    let mut m = Matrix::zeros(n, k);
    for i in 0..n {
        m.row_mut(i).copy_from_slice(&sample_unit_direction(rng, k)?);
    }
    AnchorSet::new(m, origin)
}

/// Full-sum gradient of `log p_gen(q) - log p_real(q)` at `q`.
fn full_grad(spec: &KernelSpec, real: &AnchorSet, gen: &AnchorSet, q: &[f64]) -> Result<Vec<f64>> {
    let g = log_kde_backward(spec, gen, q, None)?.grad_query;
    let r = log_kde_backward(spec, real, q, None)?.grad_query;
    Ok(g.iter().zip(&r).map(|(a, b)| a - b).collect())
}

/// Separation required between a query's nearest and second-nearest anchor,
/// in units of `tau` on the inner product.
pub const NN_SEPARATION: f64 = 2.0;

fn top_gap(set: &AnchorSet, q: &[f64]) -> f64 {
    let mut best = [f64::NEG_INFINITY; 2];
    for a in set.features().iter_rows() {
        let v = dot(a, q);
        if v > best[0] {
            best = [v, best[0]];
        } else if v > best[1] {
            best[1] = v;
        }
    }
    best[0] - best[1]
}

/// Cosine similarities between the nearest-anchor and full gradients at
/// `tau` for random unit anchors in 16 dimensions, 8 per set. Configurations
/// are redrawn until, in both sets, the nearest anchor leads the runner-up by
/// `NN_SEPARATION * tau`.
pub fn nn_cosines(seed: u64, cases: usize, tau: f64) -> Result<Vec<f64>> {
    let root = Rng::seeded(seed).fork(u64::MAX);
    let spec = KernelSpec::vmf(tau)?;
    (0..cases)
        .map(|c| {
            let mut rng = root.fork(c as u64);
            loop {
                let real = random_unit_set(&mut rng, 8, 16, Origin::Real)?;
                let gen = random_unit_set(&mut rng, 8, 16, Origin::Generated)?;
                let q = sample_unit_direction(&mut rng, 16)?;
                let margin = NN_SEPARATION * tau;
                if top_gap(&real, &q) < margin || top_gap(&gen, &q) < margin {
                    continue;
                }
                let full = full_grad(&spec, &real, &gen, &q)?;
                let approx = nn_grad_approx(&spec, &real, &gen, &q)?;
                return Ok(dot(&full, &approx) / (norm(&full) * norm(&approx)));
            }
        })
        .collect()
}

/// Largest absolute difference between the nearest-anchor and full
/// gradients when each set has a single anchor.
pub fn nn_single_anchor_gaps(seed: u64, cases: usize) -> Result<Vec<f64>> {
    let root = Rng::seeded(seed).fork(u64::MAX - 1);
    (0..cases)
        .map(|c| {
            let mut rng = root.fork(c as u64);
            let vmf = rng.below(2) == 1;
            let spec = random_kernel(&mut rng, vmf)?;
            let k = between(&mut rng, 2, 8);
            let (real, gen, q) = if vmf {
                (
                    random_unit_set(&mut rng, 1, k, Origin::Real)?,
                    random_unit_set(&mut rng, 1, k, Origin::Generated)?,
                    sample_unit_direction(&mut rng, k)?,
                )
            } else {
                (
                    AnchorSet::new(Matrix::from_vec(1, k, normals(&mut rng, k))?, Origin::Real)?,
                    AnchorSet::new(Matrix::from_vec(1, k, normals(&mut rng, k))?, Origin::Generated)?,
                    normals(&mut rng, k),
                )
            };
            let full = full_grad(&spec, &real, &gen, &q)?;
            let approx = nn_grad_approx(&spec, &real, &gen, &q)?;
            Ok(full.iter().zip(&approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        })
        .collect()
}

/// Runs every check. A row fails when any case exceeds its threshold
/// (or, for the cosine check, when too few cases reach it).
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<CheckRow>> {
    if cfg.cases == 0 {
        return Err(Error::InvalidArgument("cases must be at least 1".into()));
    }
    let root = Rng::seeded(cfg.seed);
    let mut rows = Vec::new();
    for (idx, (name, gen)) in FD_CHECKS.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut failures = 0;
        for c in 0..cfg.cases {
            let mut case = gen(&mut case_rng(&root, idx, c))?;
            let mut err = None;
            let numeric = finite_diff_grad(
                |p| match (case.f)(p) {
                    Ok(v) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                },
                &case.params,
                cfg.fd_step,
            )?;
            if let Some(e) = err {
                return Err(e);
            }
            let e = relative_error(&case.analytic, &numeric, 1e-8);
            if !(e <= cfg.tolerance) {
                failures += 1;
            }
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        rows.push(CheckRow {
            check: name.to_string(),
            cases: cfg.cases,
            worst,
            threshold: cfg.tolerance,
            failures,
            passed: failures == 0,
        });
    }

    let cos = nn_cosines(cfg.seed, cfg.cases, cfg.nn_tau)?;
    let low = cos.iter().filter(|&&c| !(c >= cfg.nn_min_cosine)).count();
    rows.push(CheckRow {
        check: "nn_approx_cosine".into(),
        cases: cfg.cases,
        worst: cos.iter().copied().fold(f64::INFINITY, f64::min),
        threshold: cfg.nn_min_cosine,
        failures: low,
        passed: (cfg.cases - low) as f64 >= cfg.nn_min_pass * cfg.cases as f64,
    });
    let gaps = nn_single_anchor_gaps(cfg.seed, cfg.cases)?;
    let bad = gaps.iter().filter(|&&g| !(g <= 1e-12)).count();
    rows.push(CheckRow {
        check: "nn_single_anchor".into(),
        cases: cfg.cases,
        worst: gaps.iter().copied().fold(0.0, f64::max),
        threshold: 1e-12,
        failures: bad,
        passed: bad == 0,
    });
    Ok(rows)
}
