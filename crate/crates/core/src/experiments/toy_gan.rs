//! Trains several loss presets from one seed on the ring mixture and
//! compares their final samples.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{evaluate, MetricConfig, MetricReport};
use crate::models::Generator;
use crate::numerics::{Matrix, Rng};
use crate::plot::{render_svg, write_points_csv, PlotSpec, Series};
use crate::trainer::{train, TrainConfig, TrainRun};

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub weights: LossWeights,
}

impl Preset {
    fn new(name: &str, weights: LossWeights) -> Self {
        Preset {
            name: name.into(),
            weights,
        }
    }
}

/// Named preset groups: `hinge`, `kdd`, `joint`, `compare` (hinge and kdd),
/// `tau-sweep` (kdd at tau 0.05, 1 and 5) and `all` (hinge, kdd, joint).
pub fn presets(name: &str) -> Result<Vec<Preset>> {
    let hinge = || Preset::new("hinge", LossWeights::hinge());
    let kdd = || Preset::new("kdd", LossWeights::kdd(1.0));
    let joint = || Preset::new("joint", LossWeights::joint(1.0, 1.0));
    Ok(match name {
        "hinge" => vec![hinge()],
        "kdd" => vec![kdd()],
        "joint" => vec![joint()],
        "compare" => vec![hinge(), kdd()],
        "tau-sweep" => [0.05, 1.0, 5.0]
            .iter()
            .map(|&t| Preset::new(&format!("kdd-tau{t}"), LossWeights::kdd(t)))
            .collect(),
        "all" => vec![hinge(), kdd(), joint()],
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset '{other}' (expected hinge, kdd, joint, compare, tau-sweep or all)"
            )))
        }
    })
}

#[derive(Debug, Clone)]
pub struct PresetRun {
    pub preset: Preset,
    pub run: TrainRun,
    pub real: Matrix,
    pub samples: Matrix,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub preset: String,
    pub gamma: f64,
    pub alpha: f64,
    pub lambda_jac: f64,
    pub tau: f64,
    pub iterations: usize,
    pub density: f64,
    pub coverage: f64,
    pub frechet: f64,
    pub mode_coverage: f64,
}

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "preset",
    "gamma",
    "alpha",
    "lambda_jac",
    "tau",
    "iterations",
    "density",
    "coverage",
    "frechet",
    "mode_coverage",
];

impl PresetRun {
    pub fn summary(&self) -> SummaryRow {
        let w = self.preset.weights;
        SummaryRow {
            preset: self.preset.name.clone(),
            gamma: w.gamma,
            alpha: w.alpha,
            lambda_jac: w.lambda_jac,
            tau: w.tau,
            iterations: self.run.history.last().map_or(0, |r| r.iteration),
            density: self.report.density,
            coverage: self.report.coverage,
            frechet: self.report.frechet,
            mode_coverage: self.report.mode_coverage,
        }
    }
}

/// Final evaluation on `final_eval_samples` points from a stream reserved for it.
pub fn final_evaluation(cfg: &TrainConfig, generator: &Generator) -> Result<(Matrix, Matrix, MetricReport)> {
    let mut rng = Rng::seeded(cfg.seed).fork(4);
    let n = cfg.final_eval_samples;
    let data = cfg.data();
    let (real, _) = data.sample(&mut rng, n);
    let mut z = Matrix::zeros(n, cfg.latent_dim);
    z.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
    let labels = cfg.conditional.then(|| (0..n).map(|_| rng.below(cfg.modes)).collect::<Vec<_>>());
    let (fake, _) = generator.forward(&z, labels.as_deref())?;
    let metric_cfg = MetricConfig {
        k: cfg.metrics_k,
        ..MetricConfig::for_mode_std(data.mode_std())
    };
    let report = evaluate(&real, &fake, &data.mode_centers(), &metric_cfg)?;
    Ok((real, fake, report))
}

pub fn run_preset(config: &TrainConfig, preset: &Preset) -> Result<PresetRun> {
    let mut cfg = config.clone();
    cfg.set_weights(preset.weights);
    if !preset.weights.kdd_active() {
        cfg.stale_real_features = false;
    }
    let run = train(cfg.clone())?;
    let (real, samples, report) = final_evaluation(&cfg, &run.generator)?;
    Ok(PresetRun {
        preset: preset.clone(),
        run,
        real,
        samples,
        report,
    })
}

/// Trains each preset from the same configuration and seed.
pub fn run_toy_gan(config: &TrainConfig, presets: &[Preset]) -> Result<Vec<PresetRun>> {
    if presets.is_empty() {
        return Err(Error::InvalidArgument("at least one preset is required".into()));
    }
    presets.iter().map(|p| run_preset(config, p)).collect()
}

pub fn write_summary<W: std::io::Write>(out: W, runs: &[PresetRun]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in runs {
        w.serialize(r.summary())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `config.json`, `summary.csv`, `frechet.svg` and, per preset,
/// `history_<name>.csv`, `samples_<name>.csv`, `samples_<name>.svg` and
/// `checkpoint_<name>.txt`.
pub fn write_toy_gan(runs: &[PresetRun], config: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config.to_json() + "\n")?;
    write_summary(fs::File::create(dir.join("summary.csv"))?, runs)?;
    let mut curves = Vec::new();
    for r in runs {
        let name = &r.preset.name;
        r.run.history.write_csv(fs::File::create(dir.join(format!("history_{name}.csv")))?)?;
        write_points_csv(
            fs::File::create(dir.join(format!("samples_{name}.csv")))?,
            &[("real", &r.real), ("fake", &r.samples)],
        )?;
        fs::write(dir.join(format!("checkpoint_{name}.txt")), r.run.checkpoint.to_text())?;
        let spec = PlotSpec {
            title: format!("{name}: final samples"),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series::scatter("real", &r.real), Series::scatter(name, &r.samples)],
            lines: Vec::new(),
        };
        fs::write(dir.join(format!("samples_{name}.svg")), render_svg(&spec))?;
        curves.push(Series::line(
            name,
            r.run.history.records.iter().map(|h| [h.iteration as f64, h.frechet]).collect(),
        ));
    }
    let spec = PlotSpec {
        title: "Frechet distance during training".into(),
        x_label: "generator iteration".into(),
        y_label: "Frechet distance".into(),
        series: curves,
        lines: Vec::new(),
    };
    fs::write(dir.join("frechet.svg"), render_svg(&spec))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::HingeBaseline;

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            n_iters: 4,
            g_hidden: 8,
            d_hidden: 8,
            feature_dim: 4,
            metrics_every: 2,
            eval_samples: 40,
            final_eval_samples: 40,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn preset_groups() {
        assert_eq!(presets("tau-sweep").unwrap().len(), 3);
        assert_eq!(presets("compare").unwrap().len(), 2);
        assert!(presets("nope").is_err());
        assert!(run_toy_gan(&tiny(), &[]).is_err());
    }

    #[test]
    fn tau_sweep_gives_three_rows() {
        let runs = run_toy_gan(&tiny(), &presets("tau-sweep").unwrap()).unwrap();
        let mut out = Vec::new();
        write_summary(&mut out, &runs).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().starts_with("kdd-tau0.05,"));
    }

    #[test]
    fn hinge_preset_matches_the_baseline() {
        let cfg = tiny();
        let run = &run_toy_gan(&cfg, &presets("hinge").unwrap()).unwrap()[0];
        let mut base = HingeBaseline::new(&cfg).unwrap();
        for _ in 0..cfg.n_iters {
            base.iterate(cfg.d_steps_per_g).unwrap();
        }
        assert_eq!(base.params().0, run.run.generator.net.params());
        assert_eq!(base.params().1, run.run.feature_map.flat_params());
    }
}
