//! Browser demo for the reconstruction crate, exported through wasm-bindgen.
//!
//! Three interactive operations back the static page in `www/`:
//! reconstruction stepping ([`ReconDemo`]), step-size schedule inspection
//! ([`schedule_curve_csv`]), and the per-algorithm memory ledger
//! ([`ledger_text`]). Everything compiles and runs on the host too, which is
//! how the unit tests exercise it; the wasm-bindgen attributes only add the
//! JavaScript ABI on wasm32 builds.

use std::sync::Arc;

use wasm_bindgen::prelude::wasm_bindgen;

use pdfw_core::ct::{simulate_data, make_phantom, Ellipse, Projector, ScanGeometry, Weighting};
use pdfw_core::experiment::ledger_report;
use pdfw_core::reg::DiffStack;
use pdfw_core::solver::{
    estimate_problem_norm, validate_schedule, ProblemSpec, SolverDriver, SolverMode, StepSchedule,
};

const GRID: usize = 48;
const VIEWS: usize = 24;
const DETECTORS: usize = 72;
const LAMBDA: f64 = 0.1;
const NOISE_STD: f64 = 0.4;
const SEED: u64 = 11;

fn demo_phantom() -> Vec<Ellipse> {
    vec![
        Ellipse {
            center: (0.0, 0.0),
            semi_axes: (20.0, 20.0),
            rotation: 0.0,
            intensity: 1.0,
        },
        Ellipse {
            center: (7.0, -4.0),
            semi_axes: (5.5, 4.0),
            rotation: -0.35,
            intensity: 0.4,
        },
        Ellipse {
            center: (-7.0, 3.0),
            semi_axes: (4.5, 7.0),
            rotation: 0.17,
            intensity: -0.35,
        },
        Ellipse {
            center: (1.5, 9.0),
            semi_axes: (2.5, 2.5),
            rotation: 0.0,
            intensity: 0.8,
        },
    ]
}

fn parse_mode(mode: &str) -> Result<SolverMode, String> {
    match mode {
        "pdfw" => Ok(SolverMode::Pdfw),
        "pdcp" => Ok(SolverMode::Pdcp),
        other => Err(format!("unknown mode {other:?} (expected pdfw or pdcp)")),
    }
}

fn parse_schedule(schedule: &str) -> Result<StepSchedule, String> {
    match schedule {
        "s1" => Ok(StepSchedule::S1),
        "s2" => Ok(StepSchedule::S2),
        other => Err(format!("unknown schedule {other:?} (expected s1 or s2)")),
    }
}

/// Maps values to opaque grayscale RGBA using a fixed [lo, hi] window.
fn to_rgba(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = (hi - lo).max(1e-12);
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// An interactive desk-scale reconstruction: a fixed 48x48 phantom and
/// 24-view scan, stepped by the chosen solver in caller-controlled chunks.
#[wasm_bindgen]
pub struct ReconDemo {
    driver: SolverDriver,
    phantom: Vec<f64>,
    window: (f64, f64),
    costs: Vec<f64>,
}

#[wasm_bindgen]
impl ReconDemo {
    /// Builds the demo problem and solver. `mode` is `"pdfw"` or `"pdcp"`;
    /// `schedule` is `"s1"` or `"s2"`.
    #[wasm_bindgen(constructor)]
    pub fn new(mode: &str, schedule: &str) -> Result<ReconDemo, String> {
        let mode = parse_mode(mode)?;
        let schedule = parse_schedule(schedule)?;

        let phantom =
            make_phantom(GRID, GRID, 1.0, &demo_phantom()).map_err(|e| e.to_string())?;
        let geometry =
            ScanGeometry::uniform(VIEWS, DETECTORS, 1.0).map_err(|e| e.to_string())?;
        let data = simulate_data(&phantom, &geometry, NOISE_STD, SEED, Weighting::InverseVariance)
            .map_err(|e| e.to_string())?;
        let a: Arc<dyn pdfw_core::linop::LinOp> =
            Arc::new(Projector::for_image(&phantom, data.geometry.clone()).map_err(|e| e.to_string())?);
        let diff =
            Arc::new(DiffStack::standard_2d(GRID, GRID).map_err(|e| e.to_string())?);
        let est = estimate_problem_norm(&a, &data, &diff, 1e-6, 10_000, SEED)
            .map_err(|e| e.to_string())?;
        let problem = ProblemSpec::new(a, data, diff, LAMBDA, est.value)
            .map_err(|e| e.to_string())?;

        let x0 = vec![0.0; GRID * GRID];
        let driver =
            SolverDriver::new(problem, mode, schedule, &x0).map_err(|e| e.to_string())?;
        let c0 = pdfw_core::metrics::cost_value(driver.problem(), driver.state().x())
            .map_err(|e| e.to_string())?;

        let lo = phantom.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = phantom.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(ReconDemo {
            driver,
            phantom: phantom.values,
            window: (lo, hi),
            costs: vec![c0],
        })
    }

    /// Advances `iters` iterations and returns the cost after the last one.
    pub fn step(&mut self, iters: usize) -> Result<f64, String> {
        for _ in 0..iters {
            self.driver.step().map_err(|e| e.to_string())?;
        }
        let cost = pdfw_core::metrics::cost_value(self.driver.problem(), self.driver.state().x())
            .map_err(|e| e.to_string())?;
        self.costs.push(cost);
        Ok(cost)
    }

    pub fn width(&self) -> usize {
        GRID
    }

    pub fn height(&self) -> usize {
        GRID
    }

    /// Iterations completed so far.
    pub fn iterations(&self) -> usize {
        self.driver.state().k()
    }

    /// Current reconstruction as RGBA bytes, windowed to the phantom range.
    pub fn recon_rgba(&self) -> Vec<u8> {
        to_rgba(self.driver.state().x(), self.window.0, self.window.1)
    }

    /// Ground-truth phantom as RGBA bytes on the same window.
    pub fn phantom_rgba(&self) -> Vec<u8> {
        to_rgba(&self.phantom, self.window.0, self.window.1)
    }

    /// Cost recorded at construction and after every `step` call.
    pub fn cost_history(&self) -> Vec<f64> {
        self.costs.clone()
    }

    /// One line per persistent state vector the active solver keeps,
    /// with element counts.
    pub fn allocation_text(&self) -> String {
        let report = self.driver.allocation_report();
        let mut lines = Vec::new();
        for (label, group) in [
            ("image", &report.image_sized),
            ("data", &report.data_sized),
            ("transform", &report.transform_sized),
        ] {
            for (name, len) in group {
                lines.push(format!("{label:<10} {name:<18} {len} elements"));
            }
        }
        lines.join("\n")
    }
}

/// Step sizes over iterations as CSV (`k,tau,sigma,alpha` header included),
/// followed by a blank line and the schedule condition report.
#[wasm_bindgen]
pub fn schedule_curve_csv(schedule: &str, l_norm: f64, k_max: usize) -> Result<String, String> {
    let schedule = parse_schedule(schedule)?;
    if !(l_norm > 0.0 && l_norm.is_finite()) {
        return Err("operator norm must be positive".into());
    }
    let k_max = k_max.clamp(10, 1_000_000);
    let mut out = String::from("k,tau,sigma,alpha\n");
    let samples = 200.min(k_max);
    for i in 0..=samples {
        let k = i * k_max / samples;
        let s = schedule.eval(k, l_norm);
        out.push_str(&format!("{k},{:.10e},{:.10e},{:.10e}\n", s.tau, s.sigma, s.alpha));
    }
    let report = validate_schedule(&schedule, l_norm, k_max).map_err(|e| e.to_string())?;
    out.push('\n');
    out.push_str(&report.to_string());
    Ok(out)
}

/// The four-algorithm memory ledger for image size `n`, transform size
/// `big_n`, data size `m`.
#[wasm_bindgen]
pub fn ledger_text(n: usize, big_n: usize, m: usize) -> Result<String, String> {
    if n == 0 || big_n == 0 || m == 0 {
        return Err("all three sizes must be positive".into());
    }
    Ok(ledger_report(n, big_n, m))
}
