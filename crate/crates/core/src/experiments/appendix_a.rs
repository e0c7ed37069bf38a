//! Two-cloud illustration of generator updates against a frozen
//! discriminator: a two-mode Gaussian real cloud, a uniform-square fake
//! cloud, and 200 SGD steps on the fake points themselves.
//!
//! The hinge update pushes every fake point along the same vector (the
//! classifier normal), so the cloud translates rigidly. The kernel update
//! pulls each fake point toward nearby real mass.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{AnchorSet, KernelSpec, Origin};
use crate::losses::{hinge_g_loss, kdd_g_loss, GenQueries};
use crate::numerics::{sample_gaussian, sample_uniform_square, sq_dist, Matrix, Rng};
use crate::plot::{render_svg, write_line_csv, write_points_csv, DecisionLine, PlotSpec, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppendixLoss {
    Hinge,
    Kdd,
}

impl AppendixLoss {
    pub fn name(&self) -> &'static str {
        match self {
            AppendixLoss::Hinge => "hinge",
            AppendixLoss::Kdd => "kdd",
        }
    }
}

/// Geometry, classifier and feature-optimization settings. Mode centers,
/// mode spread and the fake square are illustrative choices that keep the
/// clouds linearly separable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppendixAConfig {
    pub seed: u64,
    pub n_points: usize,
    pub real_centers: Vec<[f64; 2]>,
    pub real_std: f64,
    pub fake_center: [f64; 2],
    pub fake_half_width: f64,
    pub classifier_lr: f64,
    pub classifier_tol: f64,
    pub classifier_window: usize,
    pub classifier_max_steps: usize,
    pub steps: usize,
    pub lr: f64,
    pub kernel_sigma: f64,
    pub leave_one_out: bool,
    pub losses: Vec<AppendixLoss>,
}

impl Default for AppendixAConfig {
    fn default() -> Self {
        AppendixAConfig {
            seed: 0,
            n_points: 1000,
            real_centers: vec![[-2.0, 0.0], [2.0, 0.0]],
            real_std: 0.3,
            fake_center: [0.0, -3.0],
            fake_half_width: 1.0,
            classifier_lr: 0.1,
            classifier_tol: 1e-8,
            classifier_window: 100,
            classifier_max_steps: 10_000,
            steps: 200,
            lr: 10.0,
            kernel_sigma: 1.0,
            leave_one_out: true,
            losses: vec![AppendixLoss::Hinge, AppendixLoss::Kdd],
        }
    }
}

impl AppendixAConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: AppendixAConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_points < 2 || self.real_centers.is_empty() {
            return bad("need at least 2 points and one real mode");
        }
        if !(self.real_std > 0.0 && self.fake_half_width > 0.0 && self.kernel_sigma > 0.0) {
            return bad("spreads and kernel bandwidth must be positive");
        }
        if !(self.classifier_lr > 0.0 && self.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.classifier_window == 0 {
            return bad("classifier_window must be at least 1");
        }
        if self.losses.is_empty() {
            return bad("select at least one loss");
        }
        Ok(())
    }

    /// Radius for "near a real mode": three mode standard deviations.
    pub fn near_radius(&self) -> f64 {
        3.0 * self.real_std
    }

    /// Real cloud (modes get equal shares, earlier modes take the remainder)
    /// and fake cloud, from independent streams of the seed.
    pub fn sample_clouds(&self) -> Result<(Matrix, Matrix)> {
        let root = Rng::seeded(self.seed);
        let mut rr = root.fork(1);
        let m = self.real_centers.len();
        let mut real: Option<Matrix> = None;
        for (i, c) in self.real_centers.iter().enumerate() {
            let n = self.n_points / m + usize::from(i < self.n_points % m);
            let part = sample_gaussian(&mut rr, n, c, &[self.real_std; 2])?;
            real = Some(match real {
                Some(r) => r.vstack(&part)?,
                None => part,
            });
        }
        let fake = sample_uniform_square(&mut root.fork(2), self.n_points, &self.fake_center, self.fake_half_width)?;
        Ok((real.unwrap_or_else(|| Matrix::zeros(0, 2)), fake))
    }
}

/// `D(x) = <w, x> + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearClassifier {
    pub w: [f64; 2],
    pub b: f64,
    pub steps: usize,
    pub loss: f64,
}

impl LinearClassifier {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.w[0] * x[0] + self.w[1] * x[1] + self.b
    }

    pub fn line(&self) -> DecisionLine {
        DecisionLine {
            w0: self.w[0],
            w1: self.w[1],
            b: self.b,
        }
    }
}

fn hinge_objective(w: [f64; 2], b: f64, real: &Matrix, fake: &Matrix) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut g = [0.0; 3];
    for (set, sign) in [(real, -1.0), (fake, 1.0)] {
        let n = set.rows() as f64;
        for x in set.iter_rows() {
            let t = 1.0 + sign * (w[0] * x[0] + w[1] * x[1] + b);
            if t > 0.0 {
                loss += t / n;
                g[0] += sign * x[0] / n;
                g[1] += sign * x[1] / n;
                g[2] += sign / n;
            }
        }
    }
    (loss, g)
}

/// Gradient descent on the linear hinge objective from `w = 0, b = 0`,
/// stopping once the loss improves by less than `classifier_tol` over
/// `classifier_window` steps, or after `classifier_max_steps`.
pub fn fit_linear_classifier(real: &Matrix, fake: &Matrix, cfg: &AppendixAConfig) -> Result<LinearClassifier> {
    let (mut w, mut b) = ([0.0f64; 2], 0.0f64);
    let mut losses = Vec::with_capacity(cfg.classifier_max_steps + 1);
    let mut steps = 0;
    loop {
        let (loss, g) = hinge_objective(w, b, real, fake);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "classifier fit".into(),
                iteration: steps,
            });
        }
        losses.push(loss);
        let plateau = steps >= cfg.classifier_window && losses[steps - cfg.classifier_window] - loss < cfg.classifier_tol;
        if plateau || steps >= cfg.classifier_max_steps {
            return Ok(LinearClassifier { w, b, steps, loss });
        }
        w[0] -= cfg.classifier_lr * g[0];
        w[1] -= cfg.classifier_lr * g[1];
        b -= cfg.classifier_lr * g[2];
        steps += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeStats {
    pub center: [f64; 2],
    pub within_initial: f64,
    pub within_final: f64,
    /// Fake points whose nearest real mode is this one, at the end.
    pub nearest_final: usize,
}

#[derive(Debug, Clone)]
pub struct AppendixARun {
    pub loss: AppendixLoss,
    pub classifier: LinearClassifier,
    pub real: Matrix,
    pub fake_initial: Matrix,
    pub fake_final: Matrix,
    /// Largest change of any pairwise fake distance, start to finish.
    pub max_pairwise_change: f64,
    /// Largest deviation, over steps and points, of a point's displacement
    /// from the first point's displacement in the same step.
    pub max_displacement_spread: f64,
    pub near_mode_initial: f64,
    pub near_mode_final: f64,
    pub modes: Vec<ModeStats>,
}

/// Fraction of points within `radius` of their nearest center.
pub fn near_mode_fraction(points: &Matrix, centers: &[[f64; 2]], radius: f64) -> f64 {
    let r2 = radius * radius;
    let near = points
        .iter_rows()
        .filter(|p| centers.iter().any(|c| sq_dist(p, c) <= r2))
        .count();
    near as f64 / points.rows() as f64
}

pub fn max_pairwise_change(a: &Matrix, b: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.rows() {
        for j in 0..i {
            let d0 = sq_dist(a.row(i), a.row(j)).sqrt();
            let d1 = sq_dist(b.row(i), b.row(j)).sqrt();
            worst = worst.max((d1 - d0).abs());
        }
    }
    worst
}

/// Per-point gradient of the selected generator loss with the classifier
/// (hinge) or the two clouds (kernel) as the frozen discriminator.
fn feature_gradient(
    loss: AppendixLoss,
    clf: &LinearClassifier,
    real: &AnchorSet,
    fake: &Matrix,
    spec: &KernelSpec,
    loo: bool,
) -> Result<Matrix> {
    match loss {
        AppendixLoss::Hinge => {
            let scores: Vec<f64> = fake.iter_rows().map(|x| clf.score(x)).collect();
            let (_, ds) = hinge_g_loss(&scores)?;
            let mut g = Matrix::zeros(fake.rows(), 2);
            for (i, d) in ds.iter().enumerate() {
                g.row_mut(i).copy_from_slice(&[d * clf.w[0], d * clf.w[1]]);
            }
            Ok(g)
        }
        AppendixLoss::Kdd => {
            let gen = AnchorSet::new(fake.clone(), Origin::Generated)?;
            Ok(kdd_g_loss(GenQueries::Anchors, real, &gen, spec, loo, None)?.grad_gen_features)
        }
    }
}

pub fn run_appendix_a(cfg: &AppendixAConfig, loss: AppendixLoss) -> Result<AppendixARun> {
    cfg.validate()?;
    let (real, fake0) = cfg.sample_clouds()?;
    let classifier = fit_linear_classifier(&real, &fake0, cfg)?;
    let spec = KernelSpec::gaussian(cfg.kernel_sigma)?;
    let real_set = AnchorSet::new(real.clone(), Origin::Real)?;

    let mut fake = fake0.clone();
    let mut spread: f64 = 0.0;
    for step in 0..cfg.steps {
        let g = feature_gradient(loss, &classifier, &real_set, &fake, &spec, cfg.leave_one_out)?;
        let mut next = fake.clone();
        next.add_scaled(&g, -cfg.lr)?;
        if !next.all_finite() {
            return Err(Error::NonFinite {
                stage: "feature optimization".into(),
                iteration: step,
            });
        }
        let d0 = [next.get(0, 0) - fake.get(0, 0), next.get(0, 1) - fake.get(0, 1)];
        for i in 0..fake.rows() {
            for k in 0..2 {
                spread = spread.max((next.get(i, k) - fake.get(i, k) - d0[k]).abs());
            }
        }
        fake = next;
    }

    let radius = cfg.near_radius();
    let r2 = radius * radius;
    let within = |pts: &Matrix, c: &[f64; 2]| pts.iter_rows().filter(|p| sq_dist(p, c) <= r2).count() as f64 / pts.rows() as f64;
    let mut nearest = vec![0usize; cfg.real_centers.len()];
    for p in fake.iter_rows() {
        let best = (0..cfg.real_centers.len())
            .min_by(|&a, &b| sq_dist(p, &cfg.real_centers[a]).total_cmp(&sq_dist(p, &cfg.real_centers[b])))
            .unwrap_or(0);
        nearest[best] += 1;
    }
    let modes = cfg
        .real_centers
        .iter()
        .zip(nearest)
        .map(|(c, n)| ModeStats {
            center: *c,
            within_initial: within(&fake0, c),
            within_final: within(&fake, c),
            nearest_final: n,
        })
        .collect();

    Ok(AppendixARun {
        loss,
        classifier,
        max_pairwise_change: max_pairwise_change(&fake0, &fake),
        max_displacement_spread: spread,
        near_mode_initial: near_mode_fraction(&fake0, &cfg.real_centers, radius),
        near_mode_final: near_mode_fraction(&fake, &cfg.real_centers, radius),
        modes,
        real,
        fake_initial: fake0,
        fake_final: fake,
    })
}

/// Report rows `metric,value`, in a fixed order.
pub fn report_rows(run: &AppendixARun) -> Vec<(String, String)> {
    let mut rows = vec![
        ("loss".to_string(), run.loss.name().to_string()),
        ("classifier_steps".into(), run.classifier.steps.to_string()),
        ("classifier_loss".into(), run.classifier.loss.to_string()),
        ("w0".into(), run.classifier.w[0].to_string()),
        ("w1".into(), run.classifier.w[1].to_string()),
        ("b".into(), run.classifier.b.to_string()),
        ("max_pairwise_change".into(), run.max_pairwise_change.to_string()),
        ("max_displacement_spread".into(), run.max_displacement_spread.to_string()),
        ("near_mode_initial".into(), run.near_mode_initial.to_string()),
        ("near_mode_final".into(), run.near_mode_final.to_string()),
    ];
    for (i, m) in run.modes.iter().enumerate() {
        rows.push((format!("mode{i}_within_initial"), m.within_initial.to_string()));
        rows.push((format!("mode{i}_within_final"), m.within_final.to_string()));
        rows.push((format!("mode{i}_nearest_final"), m.nearest_final.to_string()));
    }
    rows
}

/// Writes `initial.csv`, `final.csv`, `boundary.csv`, `report.csv`,
/// `plot_initial.svg` and `plot_final.svg` into `dir`.
pub fn write_appendix_a(run: &AppendixARun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_points_csv(fs::File::create(dir.join("initial.csv"))?, &[("real", &run.real), ("fake", &run.fake_initial)])?;
    write_points_csv(fs::File::create(dir.join("final.csv"))?, &[("real", &run.real), ("fake", &run.fake_final)])?;
    write_line_csv(fs::File::create(dir.join("boundary.csv"))?, &[run.classifier.line()])?;
    let mut w = csv::Writer::from_writer(fs::File::create(dir.join("report.csv"))?);
    w.write_record(["metric", "value"])?;
    for (k, v) in report_rows(run) {
        w.write_record([k, v])?;
    }
    w.flush()?;
    for (name, fake, when) in [("plot_initial.svg", &run.fake_initial, "initial"), ("plot_final.svg", &run.fake_final, "final")] {
        let spec = PlotSpec {
            title: format!("{} loss, {when} fake positions", run.loss.name()),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series::scatter("real", &run.real), Series::scatter("fake", fake)],
            lines: vec![run.classifier.line()],
        };
        fs::write(dir.join(name), render_svg(&spec))?;
    }
    Ok(())
}
