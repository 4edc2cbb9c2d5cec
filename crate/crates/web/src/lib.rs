//! WebAssembly bindings for a static demo page.
//!
//! Each export has a plain Rust counterpart in [`ops`] so the logic can be
//! exercised natively.

use wasm_bindgen::prelude::*;

pub mod ops {
    use serde::Serialize;

    use dmplug::config::{ExperimentConfig, Task};
    use dmplug::experiments::{run_sample, run_solve};
    use dmplug::noise::NoiseSpec;
    use dmplug::spectral::fbe;
    use dmplug::tensor::Tensor;

    fn task(name: &str) -> Result<Task, String> {
        serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| format!("unknown task {name:?}"))
    }

    fn config(task: Task, side: usize, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_task(task);
        cfg.seed = seed;
        cfg.solver.seed = seed;
        cfg.image.side = side;
        cfg
    }

    /// `count` images from the closed-form smooth-image prior, flattened row-major.
    pub fn sample(side: usize, count: usize, seed: u64) -> Result<Vec<f64>, String> {
        let mut cfg = config(Task::Sr, side, seed);
        cfg.sample.count = count;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(run_sample(&cfg).map_err(|e| e.to_string())?.samples.into_data())
    }

    #[derive(Debug, Serialize)]
    pub struct SolveView {
        pub side: usize,
        pub truth: Vec<f64>,
        /// Present when the measurement lives on the image grid.
        pub measurement: Option<Vec<f64>>,
        pub recon: Vec<f64>,
        pub losses: Vec<f64>,
        pub psnrs: Vec<Option<f64>>,
        pub final_psnr: f64,
        pub measurement_psnr: Option<f64>,
        pub final_residual: f64,
    }

    /// Solves one seeded problem with the closed-form prior.
    pub fn solve(task_name: &str, side: usize, seed: u64, max_iters: usize, noise_sigma: f64) -> Result<SolveView, String> {
        let mut cfg = config(task(task_name)?, side, seed);
        cfg.solver.max_iters = max_iters;
        cfg.noise = (noise_sigma > 0.0).then(|| NoiseSpec::gaussian_sigma(noise_sigma));
        cfg.validate().map_err(|e| e.to_string())?;
        let out = run_solve(&cfg).map_err(|e| e.to_string())?;
        let p = &out.problem;
        Ok(SolveView {
            side,
            truth: p.truth.data().to_vec(),
            measurement: (p.y.shape() == p.truth.shape()).then(|| p.y.data().to_vec()),
            recon: out.result.final_recon.data().to_vec(),
            losses: out.result.trace.losses(),
            psnrs: out.result.trace.psnrs(),
            final_psnr: out.summary.final_psnr,
            measurement_psnr: out.summary.measurement_psnr,
            final_residual: out.summary.final_residual,
        })
    }

    /// Five radial-band relative errors between two square images.
    pub fn band_errors(x: &[f64], reference: &[f64], side: usize) -> Result<Vec<f64>, String> {
        let shape = vec![side, side];
        let a = Tensor::new(shape.clone(), x.to_vec()).map_err(|e| e.to_string())?;
        let b = Tensor::new(shape, reference.to_vec()).map_err(|e| e.to_string())?;
        Ok(fbe(&a, &b).map_err(|e| e.to_string())?.0.to_vec())
    }
}

fn js_err(msg: String) -> JsError {
    JsError::new(&msg)
}

#[wasm_bindgen]
pub fn sample(side: usize, count: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    ops::sample(side, count, seed.into()).map_err(js_err)
}

/// Returns the solve as a JSON document.
#[wasm_bindgen]
pub fn solve(task: &str, side: usize, seed: u32, max_iters: usize, noise_sigma: f64) -> Result<String, JsError> {
    let view = ops::solve(task, side, seed.into(), max_iters, noise_sigma).map_err(js_err)?;
    serde_json::to_string(&view).map_err(|e| js_err(e.to_string()))
}

#[wasm_bindgen]
pub fn band_errors(x: &[f64], reference: &[f64], side: usize) -> Result<Vec<f64>, JsError> {
    ops::band_errors(x, reference, side).map_err(js_err)
}
