//! Alternating discriminator/generator training on toy 2D mixtures.
//!
//! [`Trainer`] runs any mix of the hinge, kernel-density and Jacobian terms
//! selected by [`LossWeights`]. [`HingeBaseline`] is an independent,
//! hinge-only implementation of the same loop, kept as a reference
//! trajectory for the joint trainer.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{AnchorSet, KernelSpec, Origin};
use crate::losses::{
    hinge_d_loss, hinge_g_loss, jacobian_reg_with_directions, joint_loss, kdd_d_loss_anchored, kdd_g_loss, GenQueries,
    LossDiagnostics, LossParts, LossResult, LossWeights, RatioShift,
};
use crate::metrics::{evaluate, MetricConfig, MetricReport};
use crate::models::{
    optimizer_step, Checkpoint, FeatureMap, Generator, OptimizerConfig, OptimizerKind,
    OptimizerState,
};
use crate::numerics::{norm, sample_unit_direction, Matrix, Rng};

/// Target distribution of the toy problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Equal-weight isotropic Gaussians on a circle; mode `m` sits at angle
    /// `2 pi m / modes`.
    Ring { modes: usize, radius: f64, std: f64 },
}

impl DataSpec {
    pub fn modes(&self) -> usize {
        match *self {
            DataSpec::Ring { modes, .. } => modes,
        }
    }

    pub fn mode_std(&self) -> f64 {
        match *self {
            DataSpec::Ring { std, .. } => std,
        }
    }

    pub fn dim(&self) -> usize {
        2
    }

    pub fn mode_centers(&self) -> Matrix {
        match *self {
            DataSpec::Ring { modes, radius, .. } => {
                let mut m = Matrix::zeros(modes, 2);
                for i in 0..modes {
                    let a = std::f64::consts::TAU * i as f64 / modes as f64;
                    m.row_mut(i).copy_from_slice(&[radius * a.cos(), radius * a.sin()]);
                }
                m
            }
        }
    }

    /// `n` samples and their mode labels.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> (Matrix, Vec<usize>) {
        let centers = self.mode_centers();
        let std = self.mode_std();
        let mut x = Matrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let m = rng.below(centers.rows());
            let c = centers.row(m);
            let row = x.row_mut(i);
            row[0] = c[0] + std * rng.normal();
            row[1] = c[1] + std * rng.normal();
            labels.push(m);
        }
        (x, labels)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DataSpec::Ring { modes, radius, std } => {
                if modes == 0 || !(radius >= 0.0) || !(std > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "ring needs modes >= 1, radius >= 0 and std > 0 (got {modes}, {radius}, {std})"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// von Mises-Fisher on unit-normalized features, temperature `tau`.
    Vmf,
    /// Gaussian on raw features, bandwidth `kernel_sigma`.
    Gaussian,
}

/// Run configuration. Every key is optional in JSON; missing keys take the
/// defaults listed in [`TrainConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub modes: usize,
    pub ring_radius: f64,
    pub mode_std: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    pub d_steps_per_g: usize,
    pub latent_dim: usize,
    pub g_hidden: usize,
    pub g_layers: usize,
    pub d_hidden: usize,
    pub d_layers: usize,
    pub feature_dim: usize,
    pub optimizer: OptimizerKind,
    pub g_lr: f64,
    pub d_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub lambda_jac: f64,
    pub tau: f64,
    pub delta: f64,
    pub kernel: KernelKind,
    pub kernel_sigma: f64,
    pub augmentation_factor: usize,
    pub augmentation_sigma: f64,
    pub leave_one_out: bool,
    pub conditional: bool,
    pub projection: bool,
    pub stale_real_features: bool,
    pub metrics_every: usize,
    /// Samples per set for the periodic metrics logged during training.
    pub eval_samples: usize,
    /// Samples per set for the evaluation after training.
    pub final_eval_samples: usize,
    pub metrics_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::kdd(1.0);
        TrainConfig {
            seed: 1,
            modes: 8,
            ring_radius: 2.0,
            mode_std: 0.1,
            batch_size: 64,
            n_iters: 5000,
            d_steps_per_g: 1,
            latent_dim: 2,
            g_hidden: 64,
            g_layers: 2,
            d_hidden: 64,
            d_layers: 2,
            feature_dim: 16,
            optimizer: OptimizerKind::Adam,
            g_lr: 1e-3,
            d_lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            gamma: w.gamma,
            alpha: w.alpha,
            lambda_jac: w.lambda_jac,
            tau: w.tau,
            delta: w.delta,
            kernel: KernelKind::Vmf,
            kernel_sigma: 1.0,
            augmentation_factor: 1,
            augmentation_sigma: 0.05,
            leave_one_out: true,
            conditional: false,
            projection: false,
            stale_real_features: false,
            metrics_every: 500,
            eval_samples: 2000,
            final_eval_samples: 20_000,
            metrics_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn data(&self) -> DataSpec {
        DataSpec::Ring {
            modes: self.modes,
            radius: self.ring_radius,
            std: self.mode_std,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            alpha: self.alpha,
            lambda_jac: self.lambda_jac,
            tau: self.tau,
            delta: self.delta,
        }
    }

    pub fn set_weights(&mut self, w: LossWeights) {
        self.gamma = w.gamma;
        self.alpha = w.alpha;
        self.lambda_jac = w.lambda_jac;
        self.tau = w.tau;
        self.delta = w.delta;
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        match self.kernel {
            KernelKind::Vmf => KernelSpec::vmf(self.tau),
            KernelKind::Gaussian => KernelSpec::gaussian(self.kernel_sigma),
        }
    }

    fn optimizer_config(&self, lr: f64) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::sgd(lr),
            OptimizerKind::Adam => OptimizerConfig::adam(lr, self.beta1, self.beta2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        self.data().validate()?;
        self.weights().validate()?;
        self.kernel_spec()?;
        if self.batch_size < 1 || (self.leave_one_out && self.batch_size < 2) {
            return bad(format!("batch_size {} too small (leave-one-out needs 2)", self.batch_size));
        }
        if self.d_steps_per_g == 0 {
            return bad("d_steps_per_g must be at least 1".into());
        }
        if self.latent_dim == 0 || self.feature_dim == 0 || self.g_hidden == 0 || self.d_hidden == 0 {
            return bad("model widths must be positive".into());
        }
        if !(self.g_lr > 0.0 && self.d_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.augmentation_sigma >= 0.0) {
            return bad(format!("augmentation_sigma must be >= 0, got {}", self.augmentation_sigma));
        }
        if self.stale_real_features && !self.weights().kdd_active() {
            return bad("stale_real_features requires gamma > 0".into());
        }
        if self.projection && !self.conditional {
            return bad("projection requires conditional".into());
        }
        if self.metrics_every == 0 {
            return bad("metrics_every must be at least 1".into());
        }
        if self.eval_samples.min(self.final_eval_samples) <= self.metrics_k {
            return bad(format!("evaluation sample counts must exceed metrics_k = {}", self.metrics_k));
        }
        Ok(())
    }
}

/// Base batch followed by `n` jittered copies `x + sigma * N(0, I)` of every
/// base row, copy by copy.
pub fn assemble_anchors(base: &Matrix, n: usize, sigma: f64, origin: Origin, rng: &mut Rng) -> Result<AnchorSet> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("augmentation sigma must be >= 0, got {sigma}")));
    }
    if n == 0 {
        return AnchorSet::new(base.clone(), origin);
    }
    let (b, d) = base.shape();
    let mut data = Vec::with_capacity(b * d * (n + 1));
    data.extend_from_slice(base.as_slice());
    let mut from = Vec::with_capacity(b * n);
    for _ in 0..n {
        for i in 0..b {
            data.extend(base.row(i).iter().map(|v| v + sigma * rng.normal()));
            from.push(i);
        }
    }
    AnchorSet::with_augmentation(Matrix::from_vec(b * (n + 1), d, data)?, origin, b, from)
}

/// Order-sensitive FNV-1a hash of the bit patterns of a matrix.
pub fn checksum(m: &Matrix) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in m.as_slice() {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct DStepRecord {
    pub loss: f64,
    pub kdd: Option<f64>,
    pub hinge: Option<f64>,
    pub jacobian: Option<f64>,
    pub grad_norm: f64,
    /// Every loss evaluation point was a base (non-augmented) row.
    pub evaluated_only_base: bool,
    /// Checksum of the real-anchor features stored for the next generator
    /// step, when the stale variant is on.
    pub cached_checksum: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GStepRecord {
    pub loss: f64,
    pub grad_norm: f64,
    pub real_anchor_checksum: Option<u64>,
    /// d loss / d phi at the base generated rows.
    pub feature_grads: Matrix,
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_kdd: Option<f64>,
    pub d_hinge: Option<f64>,
    pub d_jacobian: Option<f64>,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    pub density: f64,
    pub coverage: f64,
    pub frechet: f64,
    pub mode_coverage: f64,
    #[serde(skip)]
    pub elapsed_secs: f64,
}

/// Column order of [`TrainHistory::write_csv`].
pub const HISTORY_COLUMNS: [&str; 12] = [
    "iteration",
    "d_loss",
    "g_loss",
    "d_kdd",
    "d_hinge",
    "d_jacobian",
    "d_grad_norm",
    "g_grad_norm",
    "density",
    "coverage",
    "frechet",
    "mode_coverage",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    /// CSV with a header row and [`HISTORY_COLUMNS`]; inactive loss parts are
    /// empty cells. Wall-clock time is not written so that files are
    /// reproducible.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(HISTORY_COLUMNS)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub history: TrainHistory,
    pub checkpoint: Checkpoint,
    pub generator: Generator,
    pub feature_map: FeatureMap,
}

struct DBatch {
    real: AnchorSet,
    gen: AnchorSet,
    real_labels: Option<Vec<usize>>,
    gen_labels: Option<Vec<usize>>,
    jac_directions: Option<Matrix>,
}

struct DObjective {
    loss: f64,
    grad: Vec<f64>,
    kdd: Option<f64>,
    hinge: Option<f64>,
    jacobian: Option<f64>,
    evaluated_only_base: bool,
    real_phi: AnchorSet,
}

/// Augmented generated rows are `G(z)_i + noise_j` with `i = j mod batch`.
struct GBatch {
    z: Matrix,
    labels: Option<Vec<usize>>,
    noise: Matrix,
    real_phi: Option<AnchorSet>,
    real_checksum: Option<u64>,
}

struct GObjective {
    loss: f64,
    grad: Vec<f64>,
    feature_grads: Matrix,
}

struct StaleCache {
    anchors: AnchorSet,
    checksum: u64,
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_METRICS: u64 = 3;

fn init_models(cfg: &TrainConfig, spec: &KernelSpec) -> Result<(Generator, FeatureMap)> {
    let mut rng = Rng::seeded(cfg.seed).fork(STREAM_INIT);
    let classes = cfg.conditional.then_some(cfg.modes);
    let generator = Generator::new(cfg.latent_dim, cfg.g_hidden, cfg.g_layers, 2, classes, &mut rng)?;
    let features = FeatureMap::new(
        2,
        cfg.d_hidden,
        cfg.d_layers,
        cfg.feature_dim,
        spec.requires_unit_norm(),
        true,
        if cfg.projection { Some(cfg.modes) } else { None },
        &mut rng,
    )?;
    Ok((generator, features))
}

fn latent(rng: &mut Rng, n: usize, dim: usize) -> Matrix {
    let mut z = Matrix::zeros(n, dim);
    z.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
    z
}

fn finite_or(stage: &str, iteration: usize, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.into(),
            iteration,
        })
    }
}

/// Reports numeric blow-ups inside a step as [`Error::NonFinite`].
fn classify(err: Error, stage: &str, iteration: usize) -> Error {
    match err {
        Error::DegenerateNorm { norm } | Error::NotUnitNorm { norm, .. } if !norm.is_finite() => Error::NonFinite {
            stage: stage.into(),
            iteration,
        },
        other => other,
    }
}

/// Adds the gradient of `x_aug = x_base + noise` into the base rows.
fn fold_augmented(anchors: &AnchorSet, grad_input: &Matrix) -> Matrix {
    let b = anchors.base_len();
    let mut out = grad_input.slice_rows(0, b);
    for (j, &src) in anchors.augmented_from().iter().enumerate() {
        let g = grad_input.row(b + j);
        out.row_mut(src).iter_mut().zip(g).for_each(|(o, v)| *o += v);
    }
    out
}

/// Generator/discriminator pair trained with the weighted joint objective.
pub struct Trainer {
    config: TrainConfig,
    data: DataSpec,
    spec: KernelSpec,
    weights: LossWeights,
    generator: Generator,
    features: FeatureMap,
    g_opt: OptimizerConfig,
    d_opt: OptimizerConfig,
    g_state: OptimizerState,
    d_state: OptimizerState,
    rng: Rng,
    metrics_rng: Rng,
    stale: Option<StaleCache>,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.kernel_spec()?;
        let (generator, features) = init_models(&config, &spec)?;
        let root = Rng::seeded(config.seed);
        Ok(Trainer {
            data: config.data(),
            weights: config.weights(),
            g_opt: config.optimizer_config(config.g_lr),
            d_opt: config.optimizer_config(config.d_lr),
            g_state: OptimizerState::default(),
            d_state: OptimizerState::default(),
            rng: root.fork(STREAM_TRAIN),
            metrics_rng: root.fork(STREAM_METRICS),
            stale: None,
            iteration: 0,
            spec,
            generator,
            features,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    /// Completed generator updates.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Generator and feature-map parameters.
    pub fn params(&self) -> (Vec<f64>, Vec<f64>) {
        (self.generator.net.params().to_vec(), self.features.flat_params())
    }

    fn fake_batch(&self, rng: &mut Rng, n: usize) -> Result<(Matrix, Option<Vec<usize>>, crate::models::MlpTape)> {
        let z = latent(rng, n, self.config.latent_dim);
        let labels = self
            .config
            .conditional
            .then(|| (0..n).map(|_| rng.below(self.config.modes)).collect::<Vec<_>>());
        let (x, tape) = self.generator.forward(&z, labels.as_deref())?;
        Ok((x, labels, tape))
    }

    fn anchors(&mut self, base: &Matrix, origin: Origin) -> Result<AnchorSet> {
        if self.weights.kdd_active() {
            assemble_anchors(base, self.config.augmentation_factor, self.config.augmentation_sigma, origin, &mut self.rng)
        } else {
            AnchorSet::new(base.clone(), origin)
        }
    }

    /// Projection terms `V_y . phi` at the base rows.
    fn projection(&self, phi: &Matrix, labels: Option<&[usize]>) -> Option<Vec<f64>> {
        let v = self.features.label_embedding.as_ref()?;
        let labels = labels?;
        Some(labels.iter().enumerate().map(|(i, &y)| crate::numerics::dot(v.row(y), phi.row(i))).collect())
    }

    /// Hinge scores at the base rows, including the projection term.
    fn hinge_scores(&self, phi: &Matrix, base: usize, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        let mut s = self.features.scores(&phi.slice_rows(0, base))?;
        if let Some(p) = self.projection(phi, labels) {
            s.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        Ok(s)
    }

    /// d score_i / d phi_i for each base row, written into rows of a
    /// `rows x K` gradient scaled by `ds[i]`.
    fn hinge_feature_grads(&self, ds: &[f64], rows: usize, labels: Option<&[usize]>) -> Matrix {
        let theta = self.features.score_head.as_deref().unwrap_or(&[]);
        let k = self.features.feature_dim();
        let mut g = Matrix::zeros(rows, k);
        for (i, &d) in ds.iter().enumerate() {
            let row = g.row_mut(i);
            row.iter_mut().zip(theta).for_each(|(o, t)| *o = d * t);
            if let (Some(v), Some(l)) = (&self.features.label_embedding, labels) {
                row.iter_mut().zip(v.row(l[i])).for_each(|(o, e)| *o += d * e);
            }
        }
        g
    }

    pub fn discriminator_step(&mut self) -> Result<DStepRecord> {
        let batch = self
            .sample_d_batch()
            .map_err(|e| classify(e, "discriminator step", self.iteration))?;
        let stage = "discriminator step";
        let out = self
            .discriminator_objective(&batch)
            .map_err(|e| classify(e, stage, self.iteration))?;
        let mut params = self.features.flat_params();
        optimizer_step(&mut params, &out.grad, &mut self.d_state, &self.d_opt)?;
        let ok = out.loss.is_finite() && params.iter().all(|p| p.is_finite());
        finite_or(stage, self.iteration, ok)?;
        self.features.set_flat_params(&params)?;

        let cached_checksum = if self.config.stale_real_features {
            let sum = checksum(out.real_phi.features());
            self.stale = Some(StaleCache {
                anchors: out.real_phi,
                checksum: sum,
            });
            Some(sum)
        } else {
            None
        };
        Ok(DStepRecord {
            loss: out.loss,
            kdd: out.kdd,
            hinge: out.hinge,
            jacobian: out.jacobian,
            grad_norm: norm(&out.grad),
            evaluated_only_base: out.evaluated_only_base,
            cached_checksum,
        })
    }

    fn sample_d_batch(&mut self) -> Result<DBatch> {
        let b = self.config.batch_size;
        let (xr, yr) = self.data.sample(&mut self.rng, b);
        let mut rng = self.rng.clone();
        let (xg, yg, _) = self.fake_batch(&mut rng, b)?;
        self.rng = rng;
        let real = self.anchors(&xr, Origin::Real)?;
        let gen = self.anchors(&xg, Origin::Generated)?;
        let jac_directions = if self.weights.jacobian_active() {
            let mut d = Vec::with_capacity(b * xr.cols());
            for _ in 0..b {
                d.extend(sample_unit_direction(&mut self.rng, xr.cols())?);
            }
            Some(Matrix::from_vec(b, xr.cols(), d)?)
        } else {
            None
        };
        let keep = |y: Option<Vec<usize>>| if self.config.projection { y } else { None };
        Ok(DBatch {
            real,
            gen,
            real_labels: keep(Some(yr)),
            gen_labels: keep(yg),
            jac_directions,
        })
    }

    /// Discriminator loss on a fixed batch and its gradient with respect to
    /// [`FeatureMap::flat_params`].
    fn discriminator_objective(&self, batch: &DBatch) -> Result<DObjective> {
        let b = batch.real.base_len();
        let (yr, yg) = (batch.real_labels.as_deref(), batch.gen_labels.as_deref());
        let fr = self.features.apply(batch.real.features())?;
        let fg = self.features.apply(batch.gen.features())?;
        let real_phi = batch.real.map_features(fr.phi.clone())?;
        let gen_phi = batch.gen.map_features(fg.phi.clone())?;

        let mut proj_grad = self.features.label_embedding.as_ref().map(|v| Matrix::zeros(v.rows(), v.cols()));
        let mut evaluated_only_base = true;

        let kdd = if self.weights.kdd_active() {
            let shift = match (self.projection(&fr.phi, yr), self.projection(&fg.phi, yg)) {
                (Some(real), Some(gen)) => Some(RatioShift { real, gen }),
                _ => None,
            };
            let res = kdd_d_loss_anchored(&real_phi, &gen_phi, &self.spec, self.config.leave_one_out, shift.as_ref())?;
            evaluated_only_base &= res.diagnostics.evaluated_real_rows.iter().all(|&i| i < real_phi.base_len())
                && res.diagnostics.evaluated_gen_rows.iter().all(|&i| i < gen_phi.base_len());
            Some(res)
        } else {
            None
        };

        let mut hinge_scores = None;
        let hinge = if self.weights.hinge_active() {
            let sr = self.hinge_scores(&fr.phi, b, yr)?;
            let sg = self.hinge_scores(&fg.phi, gen_phi.base_len(), yg)?;
            let h = hinge_d_loss(&sr, &sg)?;
            let res = LossResult {
                value: h.value,
                grad_real_features: self.hinge_feature_grads(&h.grad_real, real_phi.len(), yr),
                grad_gen_features: self.hinge_feature_grads(&h.grad_fake, gen_phi.len(), yg),
                diagnostics: LossDiagnostics::default(),
            };
            hinge_scores = Some(h);
            Some(res)
        } else {
            None
        };

        let xr = batch.real.features().slice_rows(0, b);
        let jac = match &batch.jac_directions {
            Some(dirs) => {
                let trunk = &self.features.trunk;
                Some(jacobian_reg_with_directions(|x| trunk.forward(x).map(|(o, _)| o), &xr, dirs, self.weights.delta)?)
            }
            None => None,
        };

        let parts = LossParts {
            kdd: kdd.as_ref(),
            hinge: hinge.as_ref(),
            jac: jac.as_ref().map(|j| j.value),
        };
        let joint = joint_loss(&parts, &self.weights)?;
        let mut grad_r = joint.grad_real_features;
        let mut grad_g = joint.grad_gen_features;

        // Projection shift inside the kernel log-ratio.
        if let (Some(res), Some(v), Some(pg)) = (&kdd, &self.features.label_embedding, proj_grad.as_mut()) {
            for (labels, grad, phi, dr) in [
                (yr, &mut grad_r, &fr.phi, &res.diagnostics.dvalue_dratio_real),
                (yg, &mut grad_g, &fg.phi, &res.diagnostics.dvalue_dratio_gen),
            ] {
                let Some(labels) = labels else { continue };
                for (i, &d) in dr.iter().enumerate() {
                    let c = self.weights.gamma * d;
                    if c == 0.0 {
                        continue;
                    }
                    let y = labels[i];
                    grad.row_mut(i).iter_mut().zip(v.row(y)).for_each(|(o, e)| *o += c * e);
                    pg.row_mut(y).iter_mut().zip(phi.row(i)).for_each(|(o, p)| *o += c * p);
                }
            }
        }

        let (mut trunk_grad, _) = self.features.backward(&fr.tape, &grad_r)?;
        let (tg, _) = self.features.backward(&fg.tape, &grad_g)?;
        trunk_grad.iter_mut().zip(&tg).for_each(|(a, b)| *a += b);

        if let Some(j) = &jac {
            let lam = self.weights.lambda_jac;
            let (_, t0) = self.features.trunk.forward(&xr)?;
            let (_, t1) = self.features.trunk.forward(&j.perturbed_inputs)?;
            let (g0, _) = self.features.trunk.backward(&t0, &j.grad_base_output)?;
            let (g1, _) = self.features.trunk.backward(&t1, &j.grad_perturbed_output)?;
            for ((a, x), y) in trunk_grad.iter_mut().zip(&g0).zip(&g1) {
                *a += lam * (x + y);
            }
        }

        let mut theta_grad = vec![0.0; self.features.feature_dim()];
        if let Some(h) = &hinge_scores {
            let a = self.weights.alpha;
            for (ds, phi, labels) in [(&h.grad_real, &fr.phi, yr), (&h.grad_fake, &fg.phi, yg)] {
                for (i, &d) in ds.iter().enumerate() {
                    theta_grad.iter_mut().zip(phi.row(i)).for_each(|(o, p)| *o += a * d * p);
                    if let (Some(pg), Some(labels)) = (proj_grad.as_mut(), labels) {
                        pg.row_mut(labels[i]).iter_mut().zip(phi.row(i)).for_each(|(o, p)| *o += a * d * p);
                    }
                }
            }
        }

        let mut grad = trunk_grad;
        grad.extend_from_slice(&theta_grad);
        if let Some(pg) = &proj_grad {
            grad.extend_from_slice(pg.as_slice());
        }
        Ok(DObjective {
            loss: joint.value,
            grad,
            kdd: kdd.map(|r| r.value),
            hinge: hinge.map(|r| r.value),
            jacobian: jac.map(|j| j.value),
            evaluated_only_base,
            real_phi,
        })
    }

    pub fn generator_step(&mut self) -> Result<GStepRecord> {
        let stage = "generator step";
        let batch = self.sample_g_batch().map_err(|e| classify(e, stage, self.iteration))?;
        let out = self
            .generator_objective(&batch)
            .map_err(|e| classify(e, stage, self.iteration))?;
        let mut params = self.generator.net.params().to_vec();
        optimizer_step(&mut params, &out.grad, &mut self.g_state, &self.g_opt)?;
        let ok = out.loss.is_finite() && params.iter().all(|p| p.is_finite());
        finite_or(stage, self.iteration, ok)?;
        self.generator.net.set_params(&params)?;
        self.iteration += 1;
        Ok(GStepRecord {
            loss: out.loss,
            grad_norm: norm(&out.grad),
            real_anchor_checksum: batch.real_checksum,
            feature_grads: out.feature_grads,
        })
    }

    fn sample_g_batch(&mut self) -> Result<GBatch> {
        let b = self.config.batch_size;
        let z = latent(&mut self.rng, b, self.config.latent_dim);
        let labels = self
            .config
            .conditional
            .then(|| (0..b).map(|_| self.rng.below(self.config.modes)).collect::<Vec<_>>());

        let mut real_checksum = None;
        let real_phi = if !self.weights.kdd_active() {
            None
        } else if self.config.stale_real_features {
            let cache = self
                .stale
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("stale feature cache is empty".into()))?;
            real_checksum = Some(cache.checksum);
            Some(cache.anchors.clone())
        } else {
            let (xr, _) = self.data.sample(&mut self.rng, b);
            let real_x = self.anchors(&xr, Origin::Real)?;
            let fr = self.features.apply(real_x.features())?;
            Some(real_x.map_features(fr.phi)?)
        };

        let n = if self.weights.kdd_active() { self.config.augmentation_factor } else { 0 };
        let sigma = self.config.augmentation_sigma;
        let mut noise = Matrix::zeros(b * n, self.data.dim());
        noise.as_mut_slice().iter_mut().for_each(|v| *v = sigma * self.rng.normal());
        Ok(GBatch {
            z,
            labels,
            noise,
            real_phi,
            real_checksum,
        })
    }

    /// Generator loss on a fixed batch and its gradient with respect to the
    /// generator parameters.
    fn generator_objective(&self, batch: &GBatch) -> Result<GObjective> {
        let b = batch.z.rows();
        let (xg, g_tape) = self.generator.forward(&batch.z, batch.labels.as_deref())?;
        let proj_labels = if self.config.projection { batch.labels.as_deref() } else { None };

        let gen_x = if batch.noise.rows() == 0 {
            AnchorSet::new(xg, Origin::Generated)?
        } else {
            let d = xg.cols();
            let mut data = xg.as_slice().to_vec();
            let mut from = Vec::with_capacity(batch.noise.rows());
            for (j, e) in batch.noise.iter_rows().enumerate() {
                let i = j % b;
                data.extend(xg.row(i).iter().zip(e).map(|(x, e)| x + e));
                from.push(i);
            }
            AnchorSet::with_augmentation(Matrix::from_vec(b + batch.noise.rows(), d, data)?, Origin::Generated, b, from)?
        };
        let fg = self.features.apply(gen_x.features())?;
        let gen_phi = gen_x.map_features(fg.phi.clone())?;

        let mut kdd = match &batch.real_phi {
            Some(real_phi) => {
                let shift = self.projection(&fg.phi, proj_labels);
                Some(kdd_g_loss(
                    GenQueries::Anchors,
                    real_phi,
                    &gen_phi,
                    &self.spec,
                    self.config.leave_one_out,
                    shift.as_deref(),
                )?)
            }
            None => None,
        };
        // Real anchors are constants here; drop their (zero) gradient so the
        // parts combine with the hinge part's empty one.
        if let Some(k) = kdd.as_mut() {
            k.grad_real_features = Matrix::zeros(0, 0);
        }
        let hinge = if self.weights.hinge_active() {
            let s = self.hinge_scores(&fg.phi, b, proj_labels)?;
            let (value, ds) = hinge_g_loss(&s)?;
            Some(LossResult {
                value,
                grad_real_features: Matrix::zeros(0, 0),
                grad_gen_features: self.hinge_feature_grads(&ds, gen_phi.len(), proj_labels),
                diagnostics: LossDiagnostics::default(),
            })
        } else {
            None
        };
        let weights = LossWeights {
            lambda_jac: 0.0,
            ..self.weights
        };
        let parts = LossParts {
            kdd: kdd.as_ref(),
            hinge: hinge.as_ref(),
            jac: None,
        };
        let joint = joint_loss(&parts, &weights)?;
        let mut grad_phi = joint.grad_gen_features;
        if let (Some(res), Some(v), Some(labels)) = (&kdd, &self.features.label_embedding, proj_labels) {
            for (i, &d) in res.diagnostics.dvalue_dratio_gen.iter().enumerate() {
                let c = self.weights.gamma * d;
                grad_phi.row_mut(i).iter_mut().zip(v.row(labels[i])).for_each(|(o, e)| *o += c * e);
            }
        }
        let feature_grads = grad_phi.slice_rows(0, b);
        let (_, grad_x) = self.features.backward(&fg.tape, &grad_phi)?;
        let grad_x = fold_augmented(&gen_x, &grad_x);
        let (grad, _) = self.generator.net.backward(&g_tape, &grad_x)?;
        Ok(GObjective {
            loss: joint.value,
            grad,
            feature_grads,
        })
    }

    /// `d_steps_per_g` discriminator steps, then one generator step.
    pub fn iterate(&mut self) -> Result<(Vec<DStepRecord>, GStepRecord)> {
        let d = (0..self.config.d_steps_per_g)
            .map(|_| self.discriminator_step())
            .collect::<Result<Vec<_>>>()?;
        Ok((d, self.generator_step()?))
    }

    /// `n` generator samples drawn with `rng`; labels are uniform when the
    /// generator is conditional.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Matrix> {
        Ok(self.fake_batch(rng, n)?.0)
    }

    /// Metrics on fresh samples from the metrics stream, which is separate
    /// from the training stream.
    pub fn evaluate(&mut self) -> Result<MetricReport> {
        let n = self.config.eval_samples;
        let (real, _) = self.data.sample(&mut self.metrics_rng, n);
        let mut rng = self.metrics_rng.clone();
        let fake = self.sample(n, &mut rng)?;
        self.metrics_rng = rng;
        let cfg = MetricConfig {
            k: self.config.metrics_k,
            ..MetricConfig::for_mode_std(self.data.mode_std())
        };
        evaluate(&real, &fake, &self.data.mode_centers(), &cfg)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        let g = self.generator.net.params().to_vec();
        let d = self.features.flat_params();
        c.push("generator", Matrix::from_vec_unchecked(1, g.len(), g));
        c.push("feature_map", Matrix::from_vec_unchecked(1, d.len(), d));
        c
    }

    /// Loads parameters written by [`Trainer::checkpoint`] for the same
    /// configuration. Optimizer state is not restored.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let get = |name: &str| {
            ckpt.get(name)
                .ok_or_else(|| Error::Parse(format!("checkpoint has no array '{name}'")))
        };
        self.generator.net.set_params(get("generator")?.as_slice())?;
        self.features.set_flat_params(get("feature_map")?.as_slice())
    }
}

/// Trains for `config.n_iters` generator updates, logging losses and
/// metrics every `metrics_every` updates and after the last one.
pub fn train(config: TrainConfig) -> Result<TrainRun> {
    let mut t = Trainer::new(config)?;
    let start = Instant::now();
    let mut history = TrainHistory::default();
    let (n, every) = (t.config.n_iters, t.config.metrics_every);
    for it in 1..=n {
        let (d, g) = t.iterate()?;
        if it % every == 0 || it == n {
            let m = t.evaluate()?;
            let last = d.last().ok_or(Error::Empty("discriminator steps"))?;
            history.records.push(TrainRecord {
                iteration: it,
                d_loss: last.loss,
                g_loss: g.loss,
                d_kdd: last.kdd,
                d_hinge: last.hinge,
                d_jacobian: last.jacobian,
                d_grad_norm: last.grad_norm,
                g_grad_norm: g.grad_norm,
                density: m.density,
                coverage: m.coverage,
                frechet: m.frechet,
                mode_coverage: m.mode_coverage,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainRun {
        history,
        checkpoint: t.checkpoint(),
        generator: t.generator.clone(),
        feature_map: t.features.clone(),
    })
}

/// Plain hinge GAN: scores `<theta, phi(x)>`, no kernel terms, no
/// augmentation, no conditioning. Consumes randomness in the same order as
/// [`Trainer`] so both can be compared under one seed.
pub struct HingeBaseline {
    batch_size: usize,
    latent_dim: usize,
    data: DataSpec,
    generator: Generator,
    features: FeatureMap,
    g_opt: OptimizerConfig,
    d_opt: OptimizerConfig,
    g_state: OptimizerState,
    d_state: OptimizerState,
    rng: Rng,
}

impl HingeBaseline {
    /// Uses the data, model, optimizer and seed settings of `config`; its
    /// loss settings are ignored.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let mut cfg = config.clone();
        cfg.set_weights(LossWeights::hinge());
        cfg.conditional = false;
        cfg.projection = false;
        cfg.stale_real_features = false;
        cfg.validate()?;
        let (generator, features) = init_models(&cfg, &cfg.kernel_spec()?)?;
        Ok(HingeBaseline {
            batch_size: cfg.batch_size,
            latent_dim: cfg.latent_dim,
            data: cfg.data(),
            generator,
            features,
            g_opt: cfg.optimizer_config(cfg.g_lr),
            d_opt: cfg.optimizer_config(cfg.d_lr),
            g_state: OptimizerState::default(),
            d_state: OptimizerState::default(),
            rng: Rng::seeded(cfg.seed).fork(STREAM_TRAIN),
        })
    }

    pub fn params(&self) -> (Vec<f64>, Vec<f64>) {
        (self.generator.net.params().to_vec(), self.features.flat_params())
    }

    fn theta(&self) -> &[f64] {
        self.features.score_head.as_deref().unwrap_or(&[])
    }

    pub fn discriminator_step(&mut self) -> Result<f64> {
        let b = self.batch_size;
        let (xr, _) = self.data.sample(&mut self.rng, b);
        let z = latent(&mut self.rng, b, self.latent_dim);
        let (xg, _) = self.generator.net.forward(&z)?;
        let fr = self.features.apply(&xr)?;
        let fg = self.features.apply(&xg)?;
        let sr = self.features.scores(&fr.phi)?;
        let sg = self.features.scores(&fg.phi)?;
        let h = hinge_d_loss(&sr, &sg)?;

        let k = self.features.feature_dim();
        let theta = self.theta().to_vec();
        let outer = |ds: &[f64]| {
            let mut g = Matrix::zeros(b, k);
            for (i, d) in ds.iter().enumerate() {
                for (o, t) in g.row_mut(i).iter_mut().zip(&theta) {
                    *o = d * t;
                }
            }
            g
        };
        let (mut grads, _) = self.features.backward(&fr.tape, &outer(&h.grad_real))?;
        let (gg, _) = self.features.backward(&fg.tape, &outer(&h.grad_fake))?;
        for (a, b) in grads.iter_mut().zip(&gg) {
            *a += b;
        }
        let mut theta_grad = vec![0.0; k];
        for (ds, phi) in [(&h.grad_real, &fr.phi), (&h.grad_fake, &fg.phi)] {
            for (i, d) in ds.iter().enumerate() {
                for (o, p) in theta_grad.iter_mut().zip(phi.row(i)) {
                    *o += d * p;
                }
            }
        }
        grads.extend(theta_grad);
        let mut params = self.features.flat_params();
        optimizer_step(&mut params, &grads, &mut self.d_state, &self.d_opt)?;
        self.features.set_flat_params(&params)?;
        Ok(h.value)
    }

    pub fn generator_step(&mut self) -> Result<f64> {
        let b = self.batch_size;
        let z = latent(&mut self.rng, b, self.latent_dim);
        let (xg, tape) = self.generator.net.forward(&z)?;
        let fg = self.features.apply(&xg)?;
        let s = self.features.scores(&fg.phi)?;
        let (value, ds) = hinge_g_loss(&s)?;
        let theta = self.theta();
        let mut grad_phi = Matrix::zeros(b, theta.len());
        for (i, d) in ds.iter().enumerate() {
            for (o, t) in grad_phi.row_mut(i).iter_mut().zip(theta) {
                *o = d * t;
            }
        }
        let (_, grad_x) = self.features.backward(&fg.tape, &grad_phi)?;
        let (grads, _) = self.generator.net.backward(&tape, &grad_x)?;
        let mut params = self.generator.net.params().to_vec();
        optimizer_step(&mut params, &grads, &mut self.g_state, &self.g_opt)?;
        self.generator.net.set_params(&params)?;
        Ok(value)
    }

    pub fn iterate(&mut self, d_steps: usize) -> Result<()> {
        for _ in 0..d_steps {
            self.discriminator_step()?;
        }
        self.generator_step()?;
        Ok(())
    }
}
