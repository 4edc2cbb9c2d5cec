//! `dmplug` command line: argument parsing, overrides and output files.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ExperimentConfig, PriorConfig, Task};
use crate::error::{Error, Result};
use crate::experiments::{run_compare, run_regress, run_sample, run_solve, run_spectra, run_train};
use crate::io::{save_checkpoint, save_image};
use crate::solver::SolveTrace;
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const TRAJECTORY_HEADER: &str = "iter,loss,psnr,ssim,var,fbe1,fbe2,fbe3,fbe4,fbe5";

#[derive(Debug, Parser)]
#[command(name = "dmplug", version, about = "Seed-space optimisation through unrolled diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the network prior on the smooth-image fixture and save a checkpoint.
    TrainScore(Common),
    /// Draw unconditional samples through the reverse chain.
    Sample(Common),
    /// Solve one inverse problem (task from the config or --task).
    Solve(Common),
    /// Identity fit with quality tracking and early stopping.
    Regress(Common),
    /// Paired run against the interleaved-guidance baseline.
    Compare(Common),
    /// Per-band error trajectory of an identity fit.
    Spectra(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment document; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the document.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Use a saved network instead of the closed-form prior.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
        format!("unknown task {s:?}; expected sr, inpaint, nblur, bid, turbulence, regress or denoise")
    })
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::TrainScore(c) => ("train-score", c),
            Command::Sample(c) => ("sample", c),
            Command::Solve(c) => ("solve", c),
            Command::Regress(c) => ("regress", c),
            Command::Compare(c) => ("compare", c),
            Command::Spectra(c) => ("spectra", c),
        }
    }

    fn default_task(&self) -> Task {
        match self {
            Command::Regress(_) | Command::Spectra(_) => Task::Denoise,
            Command::Compare(_) => Task::Nblur,
            _ => Task::Sr,
        }
    }
}

/// Config from file or subcommand defaults, then command-line overrides.
fn resolve(command: &Command) -> Result<ExperimentConfig> {
    let (_, common) = command.parts();
    let mut cfg = match (&common.config, common.task) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(task)) => ExperimentConfig::for_task(task),
        (None, None) => ExperimentConfig::for_task(command.default_task()),
    };
    if let (Some(_), Some(task)) = (&common.config, common.task) {
        cfg.task = task;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.solver.seed = seed;
        cfg.network.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(n) = common.max_iters {
        cfg.solver.max_iters = n;
    }
    if let Some(path) = &common.checkpoint {
        cfg.prior = PriorConfig::Checkpoint { path: path.clone() };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// `iter,loss,psnr,ssim,var,fbe1..fbe5`; blank cells where nothing was computed.
pub fn trajectory_csv(trace: &SolveTrace) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in &trace.records {
        let bands: Vec<String> = match r.fbe {
            Some(b) => b.0.iter().map(|v| format!("{v}")).collect(),
            None => vec![String::new(); 5],
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration,
            r.loss,
            cell(r.psnr),
            cell(r.ssim),
            cell(r.var),
            bands.join(",")
        );
    }
    out
}

#[derive(Serialize)]
struct Report<'a, S: Serialize> {
    command: &'a str,
    config: &'a ExperimentConfig,
    summary: S,
}

fn write_results<S: Serialize>(dir: &Path, command: &str, cfg: &ExperimentConfig, summary: S) -> Result<()> {
    let report = Report {
        command,
        config: cfg,
        summary,
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::contract(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join("results.json"), text)?;
    Ok(())
}

/// Saves `name.pgm` for viewing and `name.pfm` for exact values.
fn write_image(dir: &Path, name: &str, x: &Tensor) -> Result<()> {
    save_image(dir.join(format!("{name}.pgm")), x)?;
    save_image(dir.join(format!("{name}.pfm")), x)
}

fn execute(command: &Command, cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.out.as_path();
    fs::create_dir_all(dir)?;
    let (name, _) = command.parts();
    log::info!("{name}: task {:?}, seed {}, output {}", cfg.task, cfg.seed, dir.display());
    match command {
        Command::TrainScore(_) => {
            let out = run_train(cfg)?;
            save_checkpoint(dir.join("model.ckpt"), &out.checkpoint)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in out.losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l}");
            }
            fs::write(dir.join("loss.csv"), csv)?;
            write_results(dir, name, cfg, &out.summary)
        }
        Command::Sample(_) => {
            let out = run_sample(cfg)?;
            let side = cfg.image.side;
            for i in 0..out.summary.count {
                let img = Tensor::new(
                    vec![side, side],
                    out.samples.data()[i * side * side..(i + 1) * side * side].to_vec(),
                )?;
                write_image(dir, &format!("sample_{i:03}"), &img)?;
            }
            write_results(dir, name, cfg, &out.summary)
        }
        Command::Solve(_) => {
            let out = run_solve(cfg)?;
            fs::write(dir.join("trajectory.csv"), trajectory_csv(&out.result.trace))?;
            write_image(dir, "truth", &out.problem.truth)?;
            if out.problem.y.ndim() == 2 {
                write_image(dir, "measurement", &out.problem.y)?;
            }
            write_image(dir, "recon", &out.result.final_recon)?;
            write_image(dir, "best", &out.result.best_recon)?;
            if let Some(k) = &out.result.kernel {
                let peak = k.tensor().max_abs().max(f64::MIN_POSITIVE);
                save_image(dir.join("kernel.pfm"), k.tensor())?;
                save_image(dir.join("kernel.pgm"), &k.tensor().scale(1.0 / peak))?;
            }
            if let Some(tilt) = &out.result.tilt {
                let side = cfg.image.side;
                for (c, axis) in ["tilt_y", "tilt_x"].iter().enumerate() {
                    let plane = Tensor::new(
                        vec![side, side],
                        tilt.data()[c * side * side..(c + 1) * side * side].to_vec(),
                    )?;
                    save_image(dir.join(format!("{axis}.pfm")), &plane)?;
                }
            }
            write_results(dir, name, cfg, &out.summary)
        }
        Command::Regress(_) => {
            let out = run_regress(cfg)?;
            fs::write(dir.join("trajectory.csv"), trajectory_csv(&out.full.trace))?;
            write_image(dir, "truth", &out.problem.truth)?;
            write_image(dir, "measurement", &out.problem.y)?;
            write_image(dir, "recon", &out.full.final_recon)?;
            write_image(dir, "best", &out.stopped.best_recon)?;
            write_results(dir, name, cfg, &out.summary)
        }
        Command::Compare(_) => {
            let out = run_compare(cfg)?;
            fs::write(dir.join("trajectory.csv"), trajectory_csv(&out.dmplug.trace))?;
            write_image(dir, "truth", &out.problem.truth)?;
            write_image(dir, "dmplug", &out.dmplug.final_recon)?;
            if let Some(b) = &out.baseline_best {
                write_image(dir, "baseline", b)?;
            }
            write_results(dir, name, cfg, &out.summary)
        }
        Command::Spectra(_) => {
            let out = run_spectra(cfg)?;
            fs::write(dir.join("trajectory.csv"), trajectory_csv(&out.trace))?;
            write_results(dir, name, cfg, &out.summary)
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&cli.command) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match execute(&cli.command, &cfg) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::IterationRecord;
    use crate::spectral::BandErrors;

    #[test]
    fn csv_leaves_missing_cells_blank() {
        let trace = SolveTrace {
            records: vec![
                IterationRecord {
                    iteration: 0,
                    loss: 0.5,
                    psnr: None,
                    ssim: None,
                    var: None,
                    fbe: None,
                },
                IterationRecord {
                    iteration: 1,
                    loss: 0.25,
                    psnr: Some(20.0),
                    ssim: Some(0.5),
                    var: Some(1e-3),
                    fbe: Some(BandErrors([1.0, 2.0, 3.0, 4.0, 5.0])),
                },
            ],
        };
        let csv = trajectory_csv(&trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_HEADER);
        assert_eq!(lines[1], "0,0.5,,,,,,,,");
        assert_eq!(lines[2], "1,0.25,20,0.5,0.001,1,2,3,4,5");
        assert!(lines.iter().all(|l| l.split(',').count() == 10));
    }

    #[test]
    fn overrides_apply_after_the_document() {
        let cli = Cli::try_parse_from(["dmplug", "solve", "--seed", "7", "--task", "bid", "--max-iters", "3"]).unwrap();
        let cfg = resolve(&cli.command).unwrap();
        assert_eq!((cfg.seed, cfg.solver.seed, cfg.network.train.seed), (7, 7, 7));
        assert_eq!(cfg.task, Task::Bid);
        assert_eq!(cfg.solver.max_iters, 3);
        assert!(!cfg.solver.es.enabled);
    }

    #[test]
    fn bad_arguments_are_config_errors() {
        assert_eq!(run(["dmplug", "solve", "--task", "dehaze"]), EXIT_CONFIG);
        assert_eq!(run(["dmplug", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run(["dmplug", "solve", "--config", "/nonexistent/cfg.json"]), EXIT_CONFIG);
    }
}
