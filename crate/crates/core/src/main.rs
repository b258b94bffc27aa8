use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use kernelscope::alignment::{alignment_csv, preservation_csv, trends_csv};
use kernelscope::dynamics::{first_order_csv, mode_trajectory_csv, ConstantKernelModel};
use kernelscope::harness::{self, Experiment, ExperimentConfig, Layout};
use kernelscope::io;
use kernelscope::nn::Precision;
use kernelscope::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "kernelscope", version, about = "Gradient-similarity kernel instrumentation for small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Analysis commands default to OUT/experiment.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Experiment directory.
    #[arg(long, global = true, default_value = "kernelscope-out")]
    out: PathBuf,

    /// Overrides the network initialization / minibatch seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated steps. For `train` this replaces the checkpoint
    /// schedule; elsewhere it selects checkpoints.
    #[arg(long, global = true, value_delimiter = ',')]
    checkpoints: Option<Vec<u64>>,

    /// Comma-separated 1-based mode indices.
    #[arg(long, global = true, value_delimiter = ',')]
    modes: Option<Vec<usize>>,

    /// Comma-separated top-k sizes for alignment.
    #[arg(long = "k-grid", global = true, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,

    #[arg(long, global = true)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write checkpoints plus the loss trace.
    Train,
    /// Gramians and eigendecompositions of saved checkpoints.
    Spectrum,
    /// Alignment, preservation and eigenvalue-trend tables.
    Align,
    /// First-order dynamics checks.
    DynamicsCheck {
        /// Also write per-mode closed-form trajectories from the first selected checkpoint.
        #[arg(long)]
        constant_kernel: bool,
        /// Also measure the order of the first-order Gramian change (small nets only).
        #[arg(long)]
        dg: bool,
    },
    /// Fourier magnitude grids of eigenvectors.
    Fourier {
        /// Also transform the residual.
        #[arg(long)]
        residual: bool,
    },
    /// Closed-form trajectories from a frozen Gramian.
    Predict,
    /// Write the integrity manifest of the experiment directory.
    Report,
}

fn load_config(cli: &Cli, layout: &Layout) -> Result<ExperimentConfig> {
    let path = cli.config.clone().unwrap_or_else(|| layout.config());
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(ks) = &cli.k_grid {
        cfg.analysis.k_grid = Some(ks.clone());
    }
    if let Some(modes) = &cli.modes {
        cfg.analysis.modes = modes.clone();
        cfg.analysis.fourier_modes = modes.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(cli: &Cli, layout: &Layout) -> Result<Experiment> {
    let cfg = load_config(cli, layout)?;
    harness::load_experiment(layout, Some(cfg))
}

/// Selected steps, or `default` when none were given.
fn selected(cli: &Cli, default: Vec<u64>) -> Vec<u64> {
    cli.checkpoints.clone().unwrap_or(default)
}

fn spectra(cli: &Cli, layout: &Layout) -> Result<Vec<kernelscope::spectral::SpectrumSnapshot>> {
    let steps = selected(cli, layout.spectrum_steps()?);
    if steps.is_empty() {
        return Err(Error::Config("no spectra found; run `spectrum` first".into()));
    }
    harness::load_spectra(layout, Some(&steps))
}

fn run(cli: &Cli) -> Result<()> {
    let layout = Layout::new(&cli.out);
    match &cli.command {
        Command::Train => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("train needs --config".into()))?;
            let mut cfg = ExperimentConfig::load(path)?;
            if let Some(seed) = cli.seed {
                cfg.network.seed = seed;
            }
            if let Some(p) = cli.precision {
                cfg.precision = match p {
                    PrecisionArg::F64 => Precision::F64,
                    PrecisionArg::F32 => Precision::F32,
                };
            }
            if let Some(steps) = &cli.checkpoints {
                let mut steps = steps.clone();
                steps.sort_unstable();
                steps.dedup();
                cfg.checkpoints.steps = Some(steps);
            }
            if let Some(ks) = &cli.k_grid {
                cfg.analysis.k_grid = Some(ks.clone());
            }
            if let Some(modes) = &cli.modes {
                cfg.analysis.modes = modes.clone();
            }
            cfg.validate()?;
            let exp = harness::train_to_disk(&cfg, &layout)?;
            if let kernelscope::nn::RunStatus::Diverged { step, reason } = &exp.trace.status {
                return Err(Error::NonFinite {
                    what: format!("training diverged ({reason})"),
                    step: Some(*step),
                });
            }
            if let Some(r) = exp.trace.final_record() {
                info!("final loss {:.6e} at t={}", r.loss, r.t);
            }
        }
        Command::Spectrum => {
            let exp = load(cli, &layout)?;
            let steps = selected(cli, exp.primary_steps());
            harness::spectra_to_disk(&exp, &layout, Some(&steps))?;
        }
        Command::Align => {
            let exp = load(cli, &layout)?;
            let spectra = spectra(cli, &layout)?;
            let out = harness::alignment_pass(&exp, &spectra)?;
            io::write_text(&layout.analysis("alignment.csv"), &alignment_csv(&out.alignment))?;
            io::write_text(&layout.analysis("preservation.csv"), &preservation_csv(&out.preservation))?;
            io::write_text(&layout.analysis("trends.csv"), &trends_csv(&out.trends))?;
        }
        Command::DynamicsCheck { constant_kernel, dg } => {
            let exp = load(cli, &layout)?;
            let reports = harness::first_order_reports(&exp)?;
            io::write_text(&layout.dynamics("first_order.csv"), &first_order_csv(&reports))?;
            if *constant_kernel {
                let t0 = selected(cli, vec![0])[0];
                let cp = exp.trace.require(t0)?;
                let (_, spec) = harness::spectrum_of(&cp.model, &exp.data.train, t0)?;
                let ck = ConstantKernelModel::new(spec, cp.outputs.clone(), cp.residual.clone(), cp.delta)?;
                let steps: Vec<u64> = exp.trace.checkpoints.iter().filter(|c| c.t >= t0).map(|c| c.t - t0).collect();
                let modes = exp.config.analysis.modes.clone();
                io::write_text(
                    &layout.dynamics(&format!("modes_t{t0:08}.csv")),
                    &mode_trajectory_csv(&ck, &steps, &modes),
                )?;
            }
            if *dg {
                let t0 = selected(cli, vec![0])[0];
                let cp = exp.trace.require(t0)?;
                let rows = harness::gramian_order_check(&cp.model, &exp.data.train, cp.delta, 3)?;
                io::write_text(&layout.dynamics("dg_order.csv"), &harness::gramian_order_csv(&rows))?;
            }
        }
        Command::Fourier { residual } => {
            let exp = load(cli, &layout)?;
            let available = layout.spectrum_steps()?;
            let default = available.last().map(|&t| vec![t]).unwrap_or_default();
            let steps = selected(cli, default);
            if steps.is_empty() {
                return Err(Error::Config("no spectra found; run `spectrum` first".into()));
            }
            for spec in harness::load_spectra(&layout, Some(&steps))? {
                harness::fourier_to_disk(&exp, &layout, &spec, &exp.config.analysis.fourier_modes, *residual)?;
            }
        }
        Command::Predict => {
            let exp = load(cli, &layout)?;
            let t0 = selected(cli, vec![0])[0];
            let spec = match harness::load_spectra(&layout, Some(&[t0])) {
                Ok(mut s) => s.remove(0),
                Err(Error::MissingCheckpoint(_)) => {
                    let cp = exp.trace.require(t0)?;
                    harness::spectrum_of(&cp.model, &exp.data.train, t0)?.1
                }
                Err(e) => return Err(e),
            };
            let steps: Vec<u64> = exp.trace.checkpoints.iter().filter(|c| c.t >= t0).map(|c| c.t - t0).collect();
            let p = harness::predict_pass(&exp, &spec, &steps)?;
            harness::predictions_to_disk(&layout, &p)?;
        }
        Command::Report => {
            let bundle = harness::write_report(&cli.out)?;
            let incomplete = bundle.incomplete().count();
            println!(
                "{} files{}",
                bundle.files.len(),
                if incomplete > 0 {
                    format!(", {incomplete} incomplete")
                } else {
                    String::new()
                }
            );
        }
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("KERNELSCOPE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // Fails only if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    kernelscope::tune_allocator();
    configure_threads();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Leave a manifest behind so partial outputs are accounted for.
            if !matches!(cli.command, Command::Report) && Path::new(&cli.out).is_dir() {
                let _ = harness::write_report(&cli.out);
            }
            eprintln!("error: kind={} message=\"{}\"", e.kind(), escape(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
