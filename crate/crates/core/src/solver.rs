//! Seed-space optimisation of `mse(y, A(R(z)))` with optional blind
//! variables and windowed-variance early stopping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::es::{EsConfig, EsDecision, EsState};
use crate::metrics::{psnr, ssim};
use crate::operators::{project_tilt, BlindParams, BlurKernel, ForwardOperator, DEFAULT_MAX_SHIFT};
use crate::optim::{adam_step, AdamConfig, AdamState, LbfgsConfig, LbfgsState, LbfgsStep, ParamGroup};
use crate::reverse::ReverseProcess;
use crate::rng::SeedStream;
use crate::spectral::{fbe, BandErrors};
use crate::tensor::Tensor;

/// The optimised variables: seed, and for blind operators kernel logits and tilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedVariables {
    pub z: Tensor,
    pub logits: Option<Tensor>,
    pub tilt: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub seed: f64,
    pub kernel: f64,
    /// Zero freezes the tilt field at the operator's stored value.
    pub tilt: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            seed: 1e-2,
            kernel: 1e-1,
            tilt: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub optimizer: OptimizerKind,
    pub lrs: LearningRates,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
    pub es: EsConfig,
    pub seed: u64,
    pub tilt_init_std: f64,
    pub tilt_max_shift: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 5_000,
            optimizer: OptimizerKind::Adam,
            lrs: LearningRates::default(),
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig::default(),
            es: EsConfig::disabled(),
            seed: 0,
            tilt_init_std: 0.01,
            tilt_max_shift: DEFAULT_MAX_SHIFT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub var: Option<f64>,
    pub fbe: Option<BandErrors>,
}

/// One record per executed iteration, describing the iterate before its update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub records: Vec<IterationRecord>,
}

impl SolveTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn psnrs(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.psnr).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    EsTriggered,
    /// L-BFGS only: gradient below tolerance.
    Converged,
    /// L-BFGS only: backtracking exhausted.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub final_recon: Tensor,
    pub final_vars: SeedVariables,
    /// Reconstruction at the lowest windowed variance; the final one when ES never fired a window.
    pub best_recon: Tensor,
    pub best_vars: SeedVariables,
    pub best_index: Option<usize>,
    /// Softmax kernel of the final logits (blind operators only).
    pub kernel: Option<BlurKernel>,
    pub tilt: Option<Tensor>,
    pub trace: SolveTrace,
    pub stop: StopReason,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// `R(z)` and `mse(y, A(R(z)))` on the tape of the given variables.
pub fn objective<'t>(
    y: &Tensor,
    op: &ForwardOperator,
    rp: &ReverseProcess,
    z: Var<'t>,
    params: BlindParams<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let recon = rp.reverse_fn(z)?;
    let pred = op.apply(recon, params)?;
    if pred.shape() != y.shape() {
        return Err(Error::shape(
            "objective",
            format!("operator output {:?} vs measurement {:?}", pred.shape(), y.shape()),
        ));
    }
    let loss = pred.mse(z.tape().constant(y.clone()))?;
    Ok((loss, recon))
}

fn record(
    iteration: usize,
    loss: f64,
    recon: &Tensor,
    reference: Option<&Tensor>,
    var: Option<f64>,
) -> Result<IterationRecord> {
    let (p, s, f) = match reference {
        Some(r) => {
            let spectral_ok = matches!(r.shape(), [h, w] if h == w && h.is_power_of_two());
            (
                Some(psnr(recon, r)?),
                ssim(recon, r).ok(),
                if spectral_ok { fbe(recon, r).ok() } else { None },
            )
        }
        None => (None, None, None),
    };
    Ok(IterationRecord {
        iteration,
        loss,
        psnr: p,
        ssim: s,
        var,
        fbe: f,
    })
}

/// Which of the variables are trainable and how they map onto parameter groups.
struct Layout {
    logits: bool,
    tilt: bool,
}

impl Layout {
    fn groups(&self, vars: &SeedVariables, lrs: &LearningRates) -> Result<Vec<ParamGroup>> {
        let mut groups = vec![ParamGroup::new("seed", vec![vars.z.clone()], lrs.seed)?];
        if self.logits {
            groups.push(ParamGroup::new("kernel", vec![vars.logits.clone().expect("blind")], lrs.kernel)?);
        }
        if self.tilt {
            groups.push(ParamGroup::new("tilt", vec![vars.tilt.clone().expect("tilt")], lrs.tilt)?);
        }
        Ok(groups)
    }

    fn read(&self, groups: &[ParamGroup], base: &SeedVariables) -> SeedVariables {
        let mut vars = base.clone();
        vars.z = groups[0].params[0].clone();
        let mut next = 1;
        if self.logits {
            vars.logits = Some(groups[next].params[0].clone());
            next += 1;
        }
        if self.tilt {
            vars.tilt = Some(groups[next].params[0].clone());
        }
        vars
    }
}

struct Evaluation {
    loss: f64,
    recon: Tensor,
    grads: Vec<Vec<Tensor>>,
}

fn evaluate(
    y: &Tensor,
    op: &ForwardOperator,
    rp: &ReverseProcess,
    layout: &Layout,
    vars: &SeedVariables,
    with_grad: bool,
) -> Result<Evaluation> {
    let tape = Tape::new();
    let z = tape.leaf(vars.z.clone());
    let logits = vars.logits.as_ref().map(|l| {
        if layout.logits {
            tape.leaf(l.clone())
        } else {
            tape.constant(l.clone())
        }
    });
    let tilt = vars.tilt.as_ref().map(|t| {
        if layout.tilt {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    });
    let (loss, recon) = objective(y, op, rp, z, BlindParams { logits, tilt })?;
    let value = loss.value().item();
    let recon = recon.value().as_ref().clone();
    let mut grads = Vec::new();
    if with_grad && value.is_finite() {
        let g = tape.backward(loss)?;
        grads.push(vec![g.wrt(z)]);
        if layout.logits {
            grads.push(vec![g.wrt(logits.expect("blind"))]);
        }
        if layout.tilt {
            grads.push(vec![g.wrt(tilt.expect("tilt"))]);
        }
    }
    Ok(Evaluation {
        loss: value,
        recon,
        grads,
    })
}

fn initial_vars(op: &ForwardOperator, rp: &ReverseProcess, shape: &[usize], config: &SolverConfig) -> Result<(SeedVariables, Layout)> {
    let numel: usize = shape.iter().product();
    if numel % rp.dim() != 0 {
        return Err(Error::shape(
            "solve",
            format!("image {shape:?} is not a batch of {}-vectors", rp.dim()),
        ));
    }
    let root = SeedStream::new(config.seed);
    let z = root.derive("solve/seed").normal_tensor(shape);
    let (logits, tilt, layout) = match op {
        ForwardOperator::BlindBlur { logits } => (
            Some(logits.tensor().clone()),
            None,
            Layout {
                logits: config.lrs.kernel > 0.0,
                tilt: false,
            },
        ),
        ForwardOperator::TiltThenBlur { logits, tilt } => {
            let train_tilt = config.lrs.tilt > 0.0;
            let mut field = tilt.tensor().clone();
            if train_tilt {
                let noise = root
                    .derive("solve/tilt")
                    .normal_tensor(field.shape())
                    .scale(config.tilt_init_std);
                field.axpy(1.0, &noise)?;
                project_tilt(&mut field, config.tilt_max_shift);
            }
            (
                Some(logits.tensor().clone()),
                Some(field),
                Layout {
                    logits: config.lrs.kernel > 0.0,
                    tilt: train_tilt,
                },
            )
        }
        _ => (None, None, Layout { logits: false, tilt: false }),
    };
    Ok((SeedVariables { z, logits, tilt }, layout))
}

fn run(
    y: &Tensor,
    op: &ForwardOperator,
    rp: &ReverseProcess,
    config: &SolverConfig,
    reference: Option<&Tensor>,
    shape: &[usize],
) -> Result<SolveResult> {
    let (init, layout) = initial_vars(op, rp, shape, config)?;
    let mut groups = layout.groups(&init, &config.lrs)?;
    let mut es = if config.es.enabled {
        Some(EsState::<(SeedVariables, Tensor)>::new(config.es)?)
    } else {
        None
    };
    let mut adam = AdamState::new(config.adam);
    let mut lbfgs = LbfgsState::new(LbfgsConfig {
        lr: config.lrs.seed,
        ..config.lbfgs
    });
    let mut trace = SolveTrace::default();
    let mut stop = StopReason::MaxIters;

    for iteration in 0..config.max_iters {
        let vars = layout.read(&groups, &init);
        let with_grad = config.optimizer == OptimizerKind::Adam;
        let eval = evaluate(y, op, rp, &layout, &vars, with_grad)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                trace: Box::new(trace),
            });
        }
        let decision = es.as_mut().map(|state| {
            state.update(&eval.recon, || (vars.clone(), eval.recon.clone()))
        });
        let var = es.as_ref().and_then(|s| s.last_var());
        trace
            .records
            .push(record(iteration, eval.loss, &eval.recon, reference, var)?);
        if decision == Some(EsDecision::Stop) {
            stop = StopReason::EsTriggered;
            break;
        }
        match config.optimizer {
            OptimizerKind::Adam => adam_step(&mut groups, &eval.grads, &mut adam)?,
            OptimizerKind::Lbfgs => {
                let mut obj = |g: &[ParamGroup]| -> Result<(f64, Vec<Vec<Tensor>>)> {
                    let e = evaluate(y, op, rp, &layout, &layout.read(g, &init), true)?;
                    Ok((e.loss, e.grads))
                };
                match lbfgs.step(&mut groups, &mut obj)? {
                    LbfgsStep::Accepted => {}
                    LbfgsStep::Converged => {
                        stop = StopReason::Converged;
                        break;
                    }
                    LbfgsStep::LineSearchFailed => {
                        log::warn!("line search failed at iteration {iteration}");
                        stop = StopReason::LineSearchFailed;
                        break;
                    }
                }
            }
        }
        if layout.tilt {
            let idx = groups.len() - 1;
            project_tilt(&mut groups[idx].params[0], config.tilt_max_shift);
        }
    }

    let final_vars = layout.read(&groups, &init);
    let final_recon = rp.eval(&final_vars.z)?;
    let (best_index, best_vars, best_recon) = match es.and_then(|s| s.into_best()) {
        Some((i, (v, r))) => (Some(i), v, r),
        None => (None, final_vars.clone(), final_recon.clone()),
    };
    let kernel = final_vars
        .logits
        .as_ref()
        .map(|l| crate::operators::KernelLogits::new(l.clone()).map(|k| k.kernel()))
        .transpose()?;
    Ok(SolveResult {
        kernel,
        tilt: final_vars.tilt.clone(),
        final_recon,
        final_vars,
        best_recon,
        best_vars,
        best_index,
        trace,
        stop,
    })
}

/// Seed-space solve for a known operator.
///
/// `shape` is the reconstruction's shape; `reference`, when given, enables
/// PSNR/SSIM/band-error tracking against ground truth.
pub fn solve(
    y: &Tensor,
    op: &ForwardOperator,
    rp: &ReverseProcess,
    config: &SolverConfig,
    shape: &[usize],
    reference: Option<&Tensor>,
) -> Result<SolveResult> {
    if op.is_blind() {
        return Err(Error::contract(format!(
            "`{}` has unknown parameters; use solve_blind",
            op.name()
        )));
    }
    run(y, op, rp, config, reference, shape)
}

/// Joint solve over the seed, kernel logits and (for tilt-then-blur) the tilt field.
///
/// Kernel logits start from the operator's stored logits; the tilt starts
/// from the stored field plus `N(0, tilt_init_std²)` noise, and stays fixed
/// at the stored field when its learning rate is zero.
pub fn solve_blind(
    y: &Tensor,
    op: &ForwardOperator,
    rp: &ReverseProcess,
    config: &SolverConfig,
    shape: &[usize],
    reference: Option<&Tensor>,
) -> Result<SolveResult> {
    if !op.is_blind() {
        return Err(Error::contract(format!("`{}` is not a blind operator", op.name())));
    }
    run(y, op, rp, config, reference, shape)
}
