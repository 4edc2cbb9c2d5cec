//! Experiment configuration: a JSON document where every field is optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::Guidance;
use crate::error::{Error, Result};
use crate::es::EsConfig;
use crate::noise::NoiseSpec;
use crate::operators::DEFAULT_MAX_SHIFT;
use crate::prior::TrainConfig;
use crate::schedule::{make_linear_schedule, NoiseSchedule};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Area downsampling.
    Sr,
    /// Random pixel dropping.
    Inpaint,
    /// Known kernel after a pointwise power.
    Nblur,
    /// Unknown kernel.
    Bid,
    /// Unknown tilt field followed by an unknown kernel.
    Turbulence,
    /// Fit the clean image directly.
    Regress,
    /// Fit a noisy copy of the image.
    Denoise,
}

impl Task {
    /// Early-stopping preset used when the document leaves `solver.es` out.
    pub fn es_preset(self) -> EsConfig {
        match self {
            Task::Sr | Task::Inpaint | Task::Regress | Task::Denoise => EsConfig::super_resolution(),
            Task::Nblur => EsConfig::nonlinear_deblur(),
            Task::Bid | Task::Turbulence => EsConfig::disabled(),
        }
    }

    pub fn is_blind(self) -> bool {
        matches!(self, Task::Bid | Task::Turbulence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    /// The closed-form Gaussian the image fixture is drawn from.
    #[default]
    Analytic,
    /// A network saved by `train-score`; its own schedule replaces `schedule`.
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSource {
    /// The first smooth image after the training set.
    #[default]
    Fixture,
    /// `R(z)` for a seeded `z`, so the noiseless measurement is exactly reachable.
    ModelRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub side: usize,
    /// Spatial standard deviation of the smoothing filter, in pixels.
    pub width: f64,
    pub amplitude: f64,
    /// Images used by `train-score`; the ground truth is the next one.
    pub train_count: usize,
    pub truth: TruthSource,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            side: 16,
            width: 1.5,
            amplitude: 0.15,
            train_count: 2000,
            truth: TruthSource::Fixture,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    pub sr_factor: usize,
    pub inpaint_drop: f64,
    pub blur_side: usize,
    pub blur_sigma: f64,
    pub gamma: f64,
    /// Side of the kernel that blurs the blind-task measurement and of the estimate.
    pub blind_kernel_side: usize,
    pub blind_kernel_sigma: f64,
    /// Standard deviation of the true tilt field, in pixels.
    pub tilt_std: f64,
    pub tilt_max_shift: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            sr_factor: 4,
            inpaint_drop: 0.7,
            blur_side: 9,
            blur_sigma: 1.0,
            gamma: 2.2,
            blind_kernel_side: 5,
            blind_kernel_sigma: 1.0,
            tilt_std: 0.5,
            tilt_max_shift: DEFAULT_MAX_SHIFT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub widths: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            widths: vec![128, 128, 128],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub guidance: Guidance,
    /// Step-size scales tried by `compare`; the best final residual is reported.
    pub zetas: Vec<f64>,
    /// Reverse steps of the guided chain; `None` uses every schedule step.
    pub substeps: Option<usize>,
    pub cg_iters: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            guidance: Guidance::GradientUpdate,
            zetas: vec![0.01, 0.03, 0.1, 0.3, 1.0],
            substeps: None,
            cg_iters: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { count: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub out: PathBuf,
    /// Reverse steps inside the unrolled sampler.
    pub substeps: usize,
    pub schedule: ScheduleConfig,
    pub prior: PriorConfig,
    pub image: ImageConfig,
    pub operator: OperatorConfig,
    /// `null` for a noiseless measurement.
    pub noise: Option<NoiseSpec>,
    pub solver: SolverConfig,
    pub network: NetworkConfig,
    pub baseline: BaselineConfig,
    pub sample: SampleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_task(Task::Sr)
    }
}

impl ExperimentConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            seed: 0,
            out: PathBuf::from("out"),
            substeps: 3,
            schedule: ScheduleConfig::default(),
            prior: PriorConfig::default(),
            image: ImageConfig::default(),
            operator: OperatorConfig::default(),
            noise: Some(NoiseSpec::gaussian_sigma(0.01)),
            solver: SolverConfig {
                es: task.es_preset(),
                ..SolverConfig::default()
            },
            network: NetworkConfig::default(),
            baseline: BaselineConfig::default(),
            sample: SampleConfig::default(),
        }
    }

    /// Parses a document; errors carry the line and column serde reports.
    /// Without an explicit `solver.es` the task's preset applies.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if raw.pointer("/solver/es").is_none() {
            cfg.solver.es = cfg.task.es_preset();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Cross-field checks serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("field `{field}`: {why}")));
        let side = self.image.side;
        if side < 2 || !side.is_power_of_two() {
            return bad("image.side", format!("{side} is not a power of two >= 2"));
        }
        if self.substeps == 0 || self.substeps > self.schedule.steps {
            return bad("substeps", format!("{} outside 1..={}", self.substeps, self.schedule.steps));
        }
        if let Err(e) = self.schedule.build() {
            return bad("schedule", e.to_string());
        }
        let op = &self.operator;
        if op.sr_factor == 0 || side % op.sr_factor != 0 {
            return bad("operator.sr_factor", format!("{} does not divide {side}", op.sr_factor));
        }
        if !(0.0..1.0).contains(&op.inpaint_drop) {
            return bad("operator.inpaint_drop", format!("{} outside [0, 1)", op.inpaint_drop));
        }
        for (field, k) in [("operator.blur_side", op.blur_side), ("operator.blind_kernel_side", op.blind_kernel_side)] {
            if k % 2 == 0 {
                return bad(field, format!("{k} must be odd"));
            }
        }
        if !(op.gamma > 0.0) {
            return bad("operator.gamma", format!("{} must be positive", op.gamma));
        }
        if !(op.tilt_max_shift > 0.0) || !(op.tilt_std >= 0.0) {
            return bad("operator.tilt_std", "tilt scales must be positive".into());
        }
        if let Some(noise) = &self.noise {
            if let Err(e) = noise.parameter() {
                return bad("noise", e.to_string());
            }
        }
        if self.solver.es.enabled && self.solver.es.window < 2 {
            return bad("solver.es.window", "must be at least 2".into());
        }
        if self.baseline.zetas.iter().any(|z| !(*z >= 0.0)) {
            return bad("baseline.zetas", "step-size scales must be nonnegative".into());
        }
        if self.network.widths.is_empty() || self.network.widths.contains(&0) {
            return bad("network.widths", format!("{:?}", self.network.widths));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
