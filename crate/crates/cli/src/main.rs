//! `kdd`: reproduces the two-cloud feature experiment, trains toy GANs,
//! runs the gradient-check suite and renders CSV files to SVG.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kdd::experiments::appendix_a::{run_appendix_a, write_appendix_a, AppendixAConfig, AppendixLoss};
use kdd::experiments::gradcheck::{run_gradcheck, write_report, GradcheckConfig};
use kdd::experiments::toy_gan::{presets, run_toy_gan, write_summary, write_toy_gan};
use kdd::plot::{read_line_csv, read_points_csv, render_svg, PlotSpec, SeriesKind};
use kdd::trainer::TrainConfig;
use kdd::{Error, Result};

#[derive(Parser)]
#[command(name = "kdd", version, about = "Kernel density discrimination experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $KDD_OUT_DIR/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "KDD_OUT_DIR", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
}

impl Common {
    fn out_dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.out_root.join(command))
    }

    fn read_config(&self) -> Result<Option<String>> {
        self.config.as_ref().map(fs::read_to_string).transpose().map_err(Error::from)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fits a linear classifier between two fixed clouds, then moves the fake
    /// points under the hinge and KDD losses.
    AppendixA {
        #[command(flatten)]
        common: Common,
        /// Run a single loss instead of those listed in the configuration.
        #[arg(long, value_enum)]
        preset: Option<LossArg>,
    },
    /// Trains loss presets on the 8-mode ring and compares their samples.
    ToyGan {
        #[command(flatten)]
        common: Common,
        /// hinge, kdd, joint, compare, tau-sweep or all.
        #[arg(long, default_value = "compare")]
        preset: String,
        /// Overrides the number of generator iterations.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Compares every analytic gradient with central differences. Exits
    /// nonzero when any check fails.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Overrides the number of random cases per check.
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Renders `series,x,y` point files and `w0,w1,b` line files to SVG.
    Plot {
        /// Point files with header `series,x,y`.
        inputs: Vec<PathBuf>,
        /// Decision-line file with header `w0,w1,b`.
        #[arg(long)]
        lines: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "scatter")]
        kind: KindArg,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long, default_value = "x")]
        x_label: String,
        #[arg(long, default_value = "y")]
        y_label: String,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Hinge,
    Kdd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Scatter,
    Line,
}

fn appendix_a(common: &Common, preset: Option<LossArg>) -> Result<bool> {
    let mut cfg = match common.read_config()? {
        Some(text) => AppendixAConfig::from_json(&text)?,
        None => AppendixAConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = preset {
        cfg.losses = vec![match p {
            LossArg::Hinge => AppendixLoss::Hinge,
            LossArg::Kdd => AppendixLoss::Kdd,
        }];
    }
    cfg.validate()?;
    let dir = common.out_dir("appendix-a");
    for &loss in &cfg.losses {
        let run = run_appendix_a(&cfg, loss)?;
        let sub = dir.join(loss.name());
        write_appendix_a(&run, &sub)?;
        println!(
            "{}: near-mode fraction {} -> {}, max pairwise change {:e}, wrote {}",
            loss.name(),
            run.near_mode_initial,
            run.near_mode_final,
            run.max_pairwise_change,
            sub.display()
        );
    }
    Ok(true)
}

fn toy_gan(common: &Common, preset: &str, iters: Option<usize>) -> Result<bool> {
    let mut cfg = match common.read_config()? {
        Some(text) => TrainConfig::from_json(&text)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = iters {
        cfg.n_iters = n;
    }
    cfg.validate()?;
    let runs = run_toy_gan(&cfg, &presets(preset)?)?;
    let dir = common.out_dir("toy-gan");
    write_toy_gan(&runs, &cfg, &dir)?;
    write_summary(std::io::stdout().lock(), &runs)?;
    eprintln!("wrote {}", dir.display());
    Ok(true)
}

fn gradcheck(common: &Common, cases: Option<usize>) -> Result<bool> {
    let mut cfg = match common.read_config()? {
        Some(text) => serde_json::from_str(&text)?,
        None => GradcheckConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cases {
        cfg.cases = n;
    }
    let rows = run_gradcheck(&cfg)?;
    let dir = common.out_dir("gradcheck");
    fs::create_dir_all(&dir)?;
    write_report(fs::File::create(dir.join("report.csv"))?, &rows)?;
    write_report(std::io::stdout().lock(), &rows)?;
    Ok(rows.iter().all(|r| r.passed))
}

fn plot(
    inputs: &[PathBuf],
    lines: Option<&Path>,
    kind: KindArg,
    labels: [&str; 3],
    out: &Path,
) -> Result<bool> {
    let mut spec = PlotSpec {
        title: labels[0].into(),
        x_label: labels[1].into(),
        y_label: labels[2].into(),
        ..PlotSpec::default()
    };
    for path in inputs {
        let mut series = read_points_csv(fs::File::open(path)?)?;
        if let KindArg::Line = kind {
            series.iter_mut().for_each(|s| s.kind = SeriesKind::Line);
        }
        spec.series.extend(series);
    }
    if let Some(path) = lines {
        spec.lines = read_line_csv(fs::File::open(path)?)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, render_svg(&spec))?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::AppendixA { common, preset } => appendix_a(common, *preset),
        Command::ToyGan { common, preset, iters } => toy_gan(common, preset, *iters),
        Command::Gradcheck { common, cases } => gradcheck(common, *cases),
        Command::Plot {
            inputs,
            lines,
            kind,
            title,
            x_label,
            y_label,
            out,
        } => plot(inputs, lines.as_deref(), *kind, [title, x_label, y_label], out),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("kdd: gradient checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("kdd: {e}");
            ExitCode::from(2)
        }
    }
}
