//! Named experiments shared by the command line and the acceptance suite.
//!
//! Every function here is a pure function of an [`ExperimentConfig`]; all
//! randomness is derived from `config.seed`.

use std::sync::Arc;

use serde::Serialize;

use crate::baseline::{interleave_solve, InterleaveConfig};
use crate::config::{ExperimentConfig, PriorConfig, Task, TruthSource};
use crate::error::{Error, Result};
use crate::fixtures::{smooth_images, SmoothImages};
use crate::io::{load_checkpoint, Checkpoint};
use crate::metrics::{psnr, psnr_gap, ssim};
use crate::noise::corrupt;
use crate::operators::{gaussian_kernel, BlurKernel, ForwardOperator, KernelLogits, Mask, TiltField};
use crate::prior::{train_score, NeuralScore, NoisePredictor, ScorePrior};
use crate::reverse::{ReverseProcess, Variant};
use crate::rng::SeedStream;
use crate::schedule::NoiseSchedule;
use crate::solver::{solve, solve_blind, SolveResult, SolveTrace, SolverConfig, StopReason};
use crate::spectral::BandErrors;
use crate::tensor::Tensor;

/// Worker threads allowed by `DMPLUG_THREADS`, defaulting to the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("DMPLUG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Smooth-image fixture of `count` images for this configuration.
pub fn image_fixture(config: &ExperimentConfig, count: usize) -> Result<SmoothImages> {
    let im = &config.image;
    smooth_images(count, im.side, im.width, im.amplitude, config.seed)
}

/// The noise predictor and schedule selected by `config.prior`.
pub fn load_prior(config: &ExperimentConfig) -> Result<(Arc<dyn NoisePredictor>, NoiseSchedule)> {
    let pixels = config.image.side * config.image.side;
    match &config.prior {
        PriorConfig::Analytic => {
            let prior = image_fixture(config, 0)?.prior()?;
            Ok((Arc::new(prior), config.schedule.build()?))
        }
        PriorConfig::Checkpoint { path } => {
            let Checkpoint { net, schedule } = load_checkpoint(path)?;
            if net.dim() != pixels {
                return Err(Error::Config(format!(
                    "checkpoint {} models {} values, images have {pixels}",
                    path.display(),
                    net.dim()
                )));
            }
            Ok((Arc::new(ScorePrior::Neural(net)), schedule))
        }
    }
}

pub fn reverse_process(config: &ExperimentConfig, substeps: usize) -> Result<ReverseProcess> {
    let (prior, schedule) = load_prior(config)?;
    if substeps > schedule.len() {
        return Err(Error::Config(format!(
            "field `substeps`: {substeps} exceeds the prior's {} schedule steps",
            schedule.len()
        )));
    }
    ReverseProcess::with_steps(prior, schedule, substeps, Variant::DdimDeterministic)
}

/// A seeded inverse problem: ground truth, measurement and the operators around it.
#[derive(Debug, Clone)]
pub struct Problem {
    pub truth: Tensor,
    /// Noiseless `A(truth)` under the true operator.
    pub clean: Tensor,
    pub y: Tensor,
    /// Operator that generated the measurement.
    pub true_op: ForwardOperator,
    /// Operator handed to the solver; for blind tasks it holds the initial estimates.
    pub op: ForwardOperator,
    pub rp: ReverseProcess,
}

impl Problem {
    pub fn shape(&self) -> [usize; 2] {
        [self.truth.shape()[0], self.truth.shape()[1]]
    }

    /// True blur kernel of a blind task.
    pub fn true_kernel(&self) -> Option<BlurKernel> {
        self.true_op.kernel()
    }

    /// `‖y − A(x)‖ / ‖y‖` with the solver's operator (the true one for blind tasks).
    pub fn relative_residual(&self, x: &Tensor) -> Result<f64> {
        Ok(self.true_op.apply_tensor(x)?.sub(&self.y)?.norm() / self.y.norm().max(f64::MIN_POSITIVE))
    }
}

fn operators(config: &ExperimentConfig, root: &SeedStream) -> Result<(ForwardOperator, ForwardOperator)> {
    let op = &config.operator;
    let side = config.image.side;
    Ok(match config.task {
        Task::Sr => {
            let a = ForwardOperator::Downsample { factor: op.sr_factor };
            (a.clone(), a)
        }
        Task::Inpaint => {
            let mask = Mask::random(&[side, side], op.inpaint_drop, &mut root.derive("fixture/mask"))?;
            let a = ForwardOperator::Inpaint(mask);
            (a.clone(), a)
        }
        Task::Nblur => {
            let a = ForwardOperator::NonlinearBlur {
                kernel: gaussian_kernel(op.blur_side, op.blur_sigma)?,
                gamma: op.gamma,
            };
            (a.clone(), a)
        }
        Task::Bid => (
            ForwardOperator::ConvBlur(gaussian_kernel(op.blind_kernel_side, op.blind_kernel_sigma)?),
            ForwardOperator::BlindBlur {
                logits: KernelLogits::zeros(op.blind_kernel_side)?,
            },
        ),
        Task::Turbulence => {
            let kernel = gaussian_kernel(op.blind_kernel_side, op.blind_kernel_sigma)?;
            let tilt = TiltField::random(side, side, op.tilt_std, op.tilt_max_shift, &mut root.derive("fixture/tilt"))?;
            (
                ForwardOperator::TiltThenBlur {
                    logits: KernelLogits::from_kernel(&kernel)?,
                    tilt,
                },
                ForwardOperator::TiltThenBlur {
                    logits: KernelLogits::zeros(op.blind_kernel_side)?,
                    tilt: TiltField::new(Tensor::zeros(&[2, side, side]), op.tilt_max_shift)?,
                },
            )
        }
        Task::Regress | Task::Denoise => (ForwardOperator::Identity, ForwardOperator::Identity),
    })
}

/// Builds the measurement for `config.task`. `Regress` is always noiseless.
pub fn build_problem(config: &ExperimentConfig) -> Result<Problem> {
    let root = SeedStream::new(config.seed);
    let rp = reverse_process(config, config.substeps)?;
    let side = config.image.side;
    let truth = match config.image.truth {
        TruthSource::Fixture => {
            let n = config.image.train_count;
            image_fixture(config, n + 1)?.image(n)
        }
        TruthSource::ModelRange => {
            let z = root.derive("fixture/truth_seed").normal_tensor(&[side, side]);
            rp.eval(&z)?.reshape(&[side, side])?
        }
    };
    let (true_op, op) = operators(config, &root)?;
    let clean = true_op.apply_tensor(&truth)?;
    let y = match (&config.noise, config.task) {
        (Some(spec), t) if t != Task::Regress => corrupt(&clean, spec, &mut root.derive("fixture/noise"))?,
        _ => clean.clone(),
    };
    Ok(Problem {
        truth,
        clean,
        y,
        true_op,
        op,
        rp,
    })
}

/// Runs the solver that matches the problem's operator.
pub fn run_solver(problem: &Problem, solver: &SolverConfig) -> Result<SolveResult> {
    let shape = problem.shape();
    if problem.op.is_blind() {
        solve_blind(&problem.y, &problem.op, &problem.rp, solver, &shape, Some(&problem.truth))
    } else {
        solve(&problem.y, &problem.op, &problem.rp, solver, &shape, Some(&problem.truth))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub task: Task,
    pub operator: &'static str,
    pub iterations: usize,
    pub stop: StopReason,
    pub final_loss: Option<f64>,
    pub final_residual: f64,
    pub final_psnr: f64,
    pub final_ssim: Option<f64>,
    pub best_index: Option<usize>,
    pub best_psnr: f64,
    /// PSNR of the measurement itself when it lives on the image grid.
    pub measurement_psnr: Option<f64>,
    /// Total-variation distance between recovered and true kernels (blind tasks).
    pub kernel_tv: Option<f64>,
}

pub struct SolveOutcome {
    pub problem: Problem,
    pub result: SolveResult,
    pub summary: SolveSummary,
}

pub fn run_solve(config: &ExperimentConfig) -> Result<SolveOutcome> {
    let problem = build_problem(config)?;
    let result = run_solver(&problem, &config.solver)?;
    let measurement_psnr = if problem.y.shape() == problem.truth.shape() {
        Some(psnr(&problem.y, &problem.truth)?)
    } else {
        None
    };
    let kernel_tv = match (&result.kernel, problem.true_kernel()) {
        (Some(k), Some(truth)) if problem.op.is_blind() => Some(k.tv_distance(&truth)?),
        _ => None,
    };
    let summary = SolveSummary {
        task: config.task,
        operator: problem.op.name(),
        iterations: result.iterations(),
        stop: result.stop,
        final_loss: result.trace.records.last().map(|r| r.loss),
        final_residual: problem.relative_residual(&result.final_recon)?,
        final_psnr: psnr(&result.final_recon, &problem.truth)?,
        final_ssim: ssim(&result.final_recon, &problem.truth).ok(),
        best_index: result.best_index,
        best_psnr: psnr(&result.best_recon, &problem.truth)?,
        measurement_psnr,
        kernel_tv,
    };
    Ok(SolveOutcome {
        problem,
        result,
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressSummary {
    pub iterations: usize,
    pub peak_psnr: f64,
    pub peak_index: usize,
    pub final_psnr: f64,
    /// `peak − final`: how much quality the late iterations give away.
    pub overfit_drop: f64,
    /// Lowest-VAR iteration of the early-stopped run.
    pub es_index: Option<usize>,
    /// Iterations executed when early stopping fired.
    pub es_stop: Option<usize>,
    pub es_gap: Option<f64>,
    pub measurement_psnr: f64,
}

pub struct RegressOutcome {
    pub problem: Problem,
    /// Full run with early stopping disabled.
    pub full: SolveResult,
    /// The same run with early stopping; its trace is a prefix of `full`'s.
    pub stopped: SolveResult,
    pub summary: RegressSummary,
}

/// Identity-operator fit tracked to `max_iters`, plus the early-stopped replay.
pub fn run_regress(config: &ExperimentConfig) -> Result<RegressOutcome> {
    if !matches!(config.task, Task::Regress | Task::Denoise) {
        return Err(Error::Config(format!("field `task`: regress needs regress or denoise, got {:?}", config.task)));
    }
    let problem = build_problem(config)?;
    let es = if config.solver.es.enabled {
        config.solver.es
    } else {
        Task::Denoise.es_preset()
    };
    let full = run_solver(
        &problem,
        &SolverConfig {
            es: crate::es::EsConfig::disabled(),
            ..config.solver.clone()
        },
    )?;
    let stopped = run_solver(&problem, &SolverConfig { es, ..config.solver.clone() })?;
    let psnrs: Vec<f64> = full.trace.psnrs().into_iter().map(|p| p.unwrap_or(f64::NAN)).collect();
    let (peak_index, peak_psnr) = psnrs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
    let final_psnr = psnrs.last().copied().unwrap_or(f64::NAN);
    // Without a trigger the detector's pick is still its lowest-VAR point.
    let es_index = stopped.best_index;
    let es_gap = es_index.map(|i| psnr_gap(&full.trace, i)).transpose()?;
    let summary = RegressSummary {
        iterations: full.iterations(),
        peak_psnr,
        peak_index,
        final_psnr,
        overfit_drop: peak_psnr - final_psnr,
        es_index,
        es_stop: (stopped.stop == StopReason::EsTriggered).then_some(stopped.iterations()),
        es_gap,
        measurement_psnr: psnr(&problem.y, &problem.truth)?,
    };
    Ok(RegressOutcome {
        problem,
        full,
        stopped,
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineArm {
    pub zeta: f64,
    pub final_residual: Option<f64>,
    pub final_psnr: Option<f64>,
    /// Why the arm produced no reconstruction.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub dmplug_residual: f64,
    pub dmplug_psnr: f64,
    pub dmplug_iterations: usize,
    pub baseline: Vec<BaselineArm>,
    pub best_baseline_residual: Option<f64>,
    /// `best baseline residual / DMPlug residual`.
    pub residual_ratio: Option<f64>,
}

pub struct CompareOutcome {
    pub problem: Problem,
    pub dmplug: SolveResult,
    pub baseline_best: Option<Tensor>,
    pub summary: CompareSummary,
}

/// Paired DMPlug / interleaved-guidance run on one measurement.
pub fn run_compare(config: &ExperimentConfig) -> Result<CompareOutcome> {
    let problem = build_problem(config)?;
    let dmplug = run_solver(&problem, &config.solver)?;
    let dmplug_residual = problem.relative_residual(&dmplug.final_recon)?;
    let steps = config.baseline.substeps.unwrap_or(problem.rp.schedule().len());
    let guided = reverse_process(config, steps)?;
    let zetas = config.baseline.zetas.clone();
    let rng = SeedStream::new(config.seed).derive("baseline");
    let shape = problem.shape();
    let run_arm = |zeta: f64| -> (BaselineArm, Option<Tensor>) {
        let cfg = InterleaveConfig {
            zeta,
            guidance: config.baseline.guidance,
            cg_iters: config.baseline.cg_iters,
        };
        match interleave_solve(&problem.y, &problem.true_op, &guided, &cfg, &shape, &rng) {
            Ok(out) => {
                let residual = problem.relative_residual(&out.recon).ok();
                let p = psnr(&out.recon, &problem.truth).ok();
                (
                    BaselineArm {
                        zeta,
                        final_residual: residual,
                        final_psnr: p,
                        error: None,
                    },
                    Some(out.recon),
                )
            }
            Err(e) => (
                BaselineArm {
                    zeta,
                    final_residual: None,
                    final_psnr: None,
                    error: Some(e.to_string()),
                },
                None,
            ),
        }
    };
    let workers = worker_threads().min(zetas.len()).max(1);
    let mut arms: Vec<(BaselineArm, Option<Tensor>)> = Vec::with_capacity(zetas.len());
    for chunk in zetas.chunks(workers) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&z| s.spawn(move || run_arm(z))).collect();
            handles.into_iter().map(|h| h.join().expect("baseline worker panicked")).collect()
        });
        arms.extend(results);
    }
    let best = arms
        .iter()
        .filter_map(|(a, x)| a.final_residual.filter(|r| r.is_finite()).map(|r| (r, x)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let best_baseline_residual = best.map(|b| b.0);
    let baseline_best = best.and_then(|b| b.1.clone());
    let summary = CompareSummary {
        dmplug_residual,
        dmplug_psnr: psnr(&dmplug.final_recon, &problem.truth)?,
        dmplug_iterations: dmplug.iterations(),
        baseline: arms.into_iter().map(|(a, _)| a).collect(),
        best_baseline_residual,
        residual_ratio: best_baseline_residual.map(|b| b / dmplug_residual),
    };
    Ok(CompareOutcome {
        problem,
        dmplug,
        baseline_best,
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectraSummary {
    pub iterations: usize,
    /// Iteration at 10% of the run.
    pub probe_index: usize,
    pub probe_bands: Option<BandErrors>,
    pub low_before_high: Option<bool>,
}

pub struct SpectraOutcome {
    pub trace: SolveTrace,
    pub summary: SpectraSummary,
}

/// Per-band error trajectory of an identity fit with early stopping off.
pub fn run_spectra(config: &ExperimentConfig) -> Result<SpectraOutcome> {
    if !matches!(config.task, Task::Regress | Task::Denoise) {
        return Err(Error::Config(format!("field `task`: spectra needs regress or denoise, got {:?}", config.task)));
    }
    let problem = build_problem(config)?;
    let result = run_solver(
        &problem,
        &SolverConfig {
            es: crate::es::EsConfig::disabled(),
            ..config.solver.clone()
        },
    )?;
    let probe_index = result.iterations() / 10;
    let probe_bands = result.trace.records.get(probe_index).and_then(|r| r.fbe);
    Ok(SpectraOutcome {
        summary: SpectraSummary {
            iterations: result.iterations(),
            probe_index,
            probe_bands,
            low_before_high: probe_bands.map(|b| b.0[0] < b.0[4]),
        },
        trace: result.trace,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub dataset: usize,
    pub first_loss: Option<f64>,
    /// Mean minibatch loss over the last 100 steps.
    pub final_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub summary: TrainSummary,
}

/// Trains the network on the first `image.train_count` smooth images.
pub fn run_train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    let schedule = config.schedule.build()?;
    let images = image_fixture(config, config.image.train_count)?;
    let data = images.flattened();
    let mut init = SeedStream::new(config.seed).derive("network/init");
    let net = NeuralScore::new(data.shape()[1], &config.network.widths, schedule.len(), &mut init)?.fit_data_stats(&data)?;
    let out = train_score(&data, &schedule, net, &config.network.train)?;
    let tail = &out.losses[out.losses.len().saturating_sub(100)..];
    let summary = TrainSummary {
        steps: out.losses.len(),
        dataset: config.image.train_count,
        first_loss: out.losses.first().copied(),
        final_loss: (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(out.net, schedule)?,
        losses: out.losses,
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub count: usize,
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

pub struct SampleOutcome {
    /// `[count, side, side]`.
    pub samples: Tensor,
    pub summary: SampleSummary,
}

/// Unconditional draws through the configured reverse chain.
pub fn run_sample(config: &ExperimentConfig) -> Result<SampleOutcome> {
    let rp = reverse_process(config, config.substeps)?;
    let n = config.sample.count;
    let side = config.image.side;
    let samples = rp
        .sample(n, &SeedStream::new(config.seed))?
        .reshape(&[n, side, side])?;
    let mean = samples.mean();
    let var = samples.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.numel().max(1) as f64;
    Ok(SampleOutcome {
        summary: SampleSummary {
            count: n,
            pixel_mean: mean,
            pixel_std: var.sqrt(),
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_task(task);
        cfg.image.side = 8;
        cfg.image.train_count = 4;
        cfg.operator.sr_factor = 2;
        cfg.operator.blur_side = 3;
        cfg.operator.blind_kernel_side = 3;
        cfg.solver.max_iters = 5;
        cfg
    }

    #[test]
    fn every_task_builds_a_consistent_problem() {
        for task in [Task::Sr, Task::Inpaint, Task::Nblur, Task::Bid, Task::Turbulence, Task::Regress, Task::Denoise] {
            let p = build_problem(&small(task)).unwrap();
            assert_eq!(p.truth.shape(), &[8, 8]);
            assert_eq!(p.y.shape(), p.clean.shape(), "{task:?}");
            assert_eq!(p.op.is_blind(), task.is_blind());
        }
        let p = build_problem(&small(Task::Regress)).unwrap();
        assert_eq!(p.y, p.truth);
    }

    #[test]
    fn problems_are_seeded() {
        let a = build_problem(&small(Task::Inpaint)).unwrap();
        let b = build_problem(&small(Task::Inpaint)).unwrap();
        assert_eq!(a.y, b.y);
        let mut other = small(Task::Inpaint);
        other.seed = 1;
        assert_ne!(build_problem(&other).unwrap().y, a.y);
    }

    #[test]
    fn model_range_truth_is_reachable() {
        let mut cfg = small(Task::Regress);
        cfg.image.truth = TruthSource::ModelRange;
        let p = build_problem(&cfg).unwrap();
        let z = SeedStream::new(cfg.seed).derive("fixture/truth_seed").normal_tensor(&[8, 8]);
        assert_eq!(p.truth.data(), p.rp.eval(&z).unwrap().data());
    }

    #[test]
    fn regress_replay_is_a_prefix() {
        let mut cfg = small(Task::Denoise);
        cfg.solver.max_iters = 60;
        cfg.solver.es = crate::es::EsConfig {
            window: 3,
            patience: 5,
            enabled: true,
        };
        let out = run_regress(&cfg).unwrap();
        let n = out.stopped.trace.len();
        assert_eq!(out.full.trace.len(), 60);
        assert!(n < 60);
        assert_eq!(out.full.trace.losses()[..n], out.stopped.trace.losses()[..]);
        assert_eq!(out.full.trace.psnrs()[..n], out.stopped.trace.psnrs()[..]);
    }

    #[test]
    fn thread_cap_reads_environment() {
        assert!(worker_threads() >= 1);
    }
}
