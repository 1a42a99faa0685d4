//! Config-driven experiment harness: parse a TOML experiment description,
//! simulate data once, estimate the operator norm once, freeze or load the
//! reference solution, then execute each configured run and write its
//! artifacts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::ct::{
    make_phantom, simulate_data, Ellipse, ImageGrid, Projector, ScanGeometry, SinogramData,
    Weighting,
};
use crate::error::{Error, Result};
use crate::io::{read_image, write_image, write_metrics_csv};
use crate::linop::{apply_adjoint, apply_forward, LinOp, OpNormEstimate};
use crate::metrics::{memory_ledger, LedgerAlgorithm, MetricsLogger, RoiMask};
use crate::reg::DiffStack;
use crate::solver::{
    estimate_problem_norm, run_solver, ProblemSpec, SigmaRule, SolverMode, StepRule, StepSchedule,
};

/// Power-iteration settings used once per experiment. The fixed seed keeps
/// the whole pipeline deterministic; the 1% pad applied downstream absorbs
/// an estimate that stops slightly short.
const NORM_TOL: f64 = 1e-10;
const NORM_MAX_ITERS: usize = 100_000;
const NORM_SEED: u64 = 0x5eed;

/// Primal initialization rule for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    /// x⁽⁰⁾ = 0.
    Zero,
    /// x⁽⁰⁾ = c·Aᵀb with c chosen to minimize the weighted data fit of c·Aᵀb.
    ScaledBackprojection,
}

/// One configured solver execution.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub name: String,
    pub mode: SolverMode,
    pub schedule: StepSchedule,
    pub k_max: usize,
    pub x0: InitRule,
}

/// Where the reference solution x* comes from.
#[derive(Debug, Clone)]
pub enum ReferencePolicy {
    /// Read a previously frozen image (path already resolved).
    Load(PathBuf),
    /// Run this solver configuration from zero and freeze the result to
    /// `reference.bin` in the output directory.
    Compute {
        mode: SolverMode,
        schedule: StepSchedule,
        k_max: usize,
    },
}

/// A parsed, validated experiment description with all paths resolved.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub supersample: usize,
    pub ellipses: Vec<Ellipse>,
    pub geometry: ScanGeometry,
    pub weighting: Weighting,
    pub offsets: Vec<(i32, i32)>,
    pub lambda: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub record_wall_seconds: bool,
    pub reference: ReferencePolicy,
    pub runs: Vec<RunPlan>,
}

/// Raw serde shape of the TOML file. Unknown keys are rejected so typos in
/// field names fail loudly instead of silently using defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    output_dir: PathBuf,
    lambda: f64,
    noise_std: f64,
    seed: u64,
    #[serde(default)]
    record_wall_seconds: bool,
    #[serde(default)]
    weighting: WeightingConfig,
    grid: GridConfig,
    phantom: PhantomConfig,
    geometry: GeometryConfig,
    #[serde(default)]
    regularization: RegularizationConfig,
    reference: RawReference,
    runs: Vec<RawRun>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    nx: usize,
    ny: usize,
    spacing: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhantomConfig {
    #[serde(default = "default_supersample")]
    supersample: usize,
    #[serde(default)]
    ellipses: Vec<EllipseConfig>,
}

fn default_supersample() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipseConfig {
    center: [f64; 2],
    semi_axes: [f64; 2],
    #[serde(default)]
    rotation_deg: f64,
    intensity: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryConfig {
    num_views: usize,
    num_detectors: usize,
    detector_spacing: f64,
    #[serde(default)]
    angles: AnglesConfig,
}

/// Either the string `"uniform"` or an explicit ascending list of view
/// angles in radians.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AnglesConfig {
    Rule(String),
    Explicit(Vec<f64>),
}

impl Default for AnglesConfig {
    fn default() -> Self {
        AnglesConfig::Rule("uniform".to_owned())
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum WeightingConfig {
    #[default]
    Uniform,
    InverseVariance,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegularizationConfig {
    offsets: Option<Vec<[i32; 2]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    load: Option<PathBuf>,
    compute: Option<RawComputeReference>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawComputeReference {
    mode: ModeConfig,
    schedule: ScheduleConfig,
    k_max: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeConfig {
    Pdfw,
    Pdcp,
}

impl From<ModeConfig> for SolverMode {
    fn from(m: ModeConfig) -> Self {
        match m {
            ModeConfig::Pdfw => SolverMode::Pdfw,
            ModeConfig::Pdcp => SolverMode::Pdcp,
        }
    }
}

/// Either a preset name (`"s1"`, `"s2"`) or a custom rule table.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScheduleConfig {
    Preset(String),
    Custom(CustomScheduleConfig),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomScheduleConfig {
    tau: RuleConfig,
    sigma: SigmaRuleConfig,
    alpha: RuleConfig,
    theta: f64,
}

/// A bare number is a constant rule; a `{ c, p }` table is `(c/(c+k))^p`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
enum RuleConfig {
    Constant(f64),
    Power(PowerRuleConfig),
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct PowerRuleConfig {
    c: f64,
    p: f64,
}

/// Like [`RuleConfig`] plus the string `"inverse-tau-l-squared"` for the
/// coupled dual step σ_k = 1/(L²τ_k).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SigmaRuleConfig {
    Coupled(String),
    Constant(f64),
    Power(PowerRuleConfig),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    name: String,
    mode: ModeConfig,
    schedule: ScheduleConfig,
    k_max: usize,
    #[serde(default)]
    x0: X0Config,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum X0Config {
    #[default]
    Zero,
    ScaledBackprojection,
}

impl From<X0Config> for InitRule {
    fn from(x: X0Config) -> Self {
        match x {
            X0Config::Zero => InitRule::Zero,
            X0Config::ScaledBackprojection => InitRule::ScaledBackprojection,
        }
    }
}

fn build_rule(r: RuleConfig) -> StepRule {
    match r {
        RuleConfig::Constant(c) => StepRule::Constant(c),
        RuleConfig::Power(PowerRuleConfig { c, p }) => StepRule::Power { c, p },
    }
}

fn build_sigma_rule(r: &SigmaRuleConfig) -> Result<SigmaRule> {
    match r {
        SigmaRuleConfig::Coupled(s) if s == "inverse-tau-l-squared" => {
            Ok(SigmaRule::InverseTauLSquared)
        }
        SigmaRuleConfig::Coupled(s) => Err(Error::invalid(
            "sigma",
            format!("unknown rule {s:?} (expected \"inverse-tau-l-squared\", a number, or {{ c, p }})"),
        )),
        SigmaRuleConfig::Constant(c) => Ok(SigmaRule::Constant(*c)),
        SigmaRuleConfig::Power(PowerRuleConfig { c, p }) => Ok(SigmaRule::Power { c: *c, p: *p }),
    }
}

fn build_schedule(s: &ScheduleConfig) -> Result<StepSchedule> {
    match s {
        ScheduleConfig::Preset(name) => match name.to_ascii_lowercase().as_str() {
            "s1" => Ok(StepSchedule::S1),
            "s2" => Ok(StepSchedule::S2),
            other => Err(Error::invalid(
                "schedule",
                format!("unknown schedule {other:?} (expected \"s1\", \"s2\", or a custom table)"),
            )),
        },
        ScheduleConfig::Custom(c) => StepSchedule::custom(
            build_rule(c.tau),
            build_sigma_rule(&c.sigma)?,
            build_rule(c.alpha),
            c.theta,
        ),
    }
}

/// File stems the harness claims for itself; run names may not collide.
const RESERVED_NAMES: [&str; 3] = ["reference", "phantom", "memory_ledger"];

fn validate_run_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > 64 {
        return Err(Error::invalid(
            "runs.name",
            "must be 1 to 64 characters long",
        ));
    }
    if !name
        .chars()
        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
    {
        return Err(Error::invalid(
            "runs.name",
            format!("{name:?} may only contain lowercase letters, digits, '-', '_'"),
        ));
    }
    if RESERVED_NAMES.contains(&name) {
        return Err(Error::invalid(
            "runs.name",
            format!("{name:?} is reserved for a harness output file"),
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads and validates a TOML experiment file. Relative paths inside the
    /// file (the output directory and any reference image) are resolved
    /// against the file's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::InvalidArgument { field, reason } if field == "config" => {
                Error::bad_file(path, reason)
            }
            other => other,
        })
    }

    /// Parses config text, resolving relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;

        if !(raw.lambda > 0.0 && raw.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be positive and finite"));
        }
        if !(raw.noise_std >= 0.0 && raw.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", "must be nonnegative and finite"));
        }
        if raw.phantom.supersample == 0 {
            return Err(Error::invalid("phantom.supersample", "must be at least 1"));
        }

        let ellipses: Vec<Ellipse> = raw
            .phantom
            .ellipses
            .iter()
            .map(|e| Ellipse {
                center: (e.center[0], e.center[1]),
                semi_axes: (e.semi_axes[0], e.semi_axes[1]),
                rotation: e.rotation_deg.to_radians(),
                intensity: e.intensity,
            })
            .collect();

        let geometry = match &raw.geometry.angles {
            AnglesConfig::Rule(rule) if rule == "uniform" => ScanGeometry::uniform(
                raw.geometry.num_views,
                raw.geometry.num_detectors,
                raw.geometry.detector_spacing,
            )?,
            AnglesConfig::Rule(rule) => {
                return Err(Error::invalid(
                    "geometry.angles",
                    format!("unknown rule {rule:?} (expected \"uniform\" or a list of radians)"),
                ));
            }
            AnglesConfig::Explicit(angles) => {
                if angles.len() != raw.geometry.num_views {
                    return Err(Error::invalid(
                        "geometry.angles",
                        format!(
                            "{} explicit angles given but num_views = {}",
                            angles.len(),
                            raw.geometry.num_views
                        ),
                    ));
                }
                ScanGeometry::new(
                    angles.clone(),
                    raw.geometry.num_detectors,
                    raw.geometry.detector_spacing,
                )?
            }
        };

        let offsets: Vec<(i32, i32)> = match raw.regularization.offsets {
            Some(list) => list.iter().map(|o| (o[0], o[1])).collect(),
            None => DiffStack::standard_offsets(),
        };
        // Constructed once here purely to validate the offsets against the grid.
        DiffStack::new(raw.grid.nx, raw.grid.ny, offsets.clone())?;

        let reference = match (raw.reference.load, raw.reference.compute) {
            (Some(path), None) => {
                let resolved = if path.is_relative() {
                    base_dir.join(path)
                } else {
                    path
                };
                ReferencePolicy::Load(resolved)
            }
            (None, Some(c)) => {
                if c.k_max == 0 {
                    return Err(Error::invalid(
                        "reference.compute.k_max",
                        "a computed reference needs at least one iteration",
                    ));
                }
                ReferencePolicy::Compute {
                    mode: c.mode.into(),
                    schedule: build_schedule(&c.schedule)?,
                    k_max: c.k_max,
                }
            }
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    "reference",
                    "give either load or compute, not both",
                ));
            }
            (None, None) => {
                return Err(Error::invalid("reference", "needs either load or compute"));
            }
        };

        if raw.runs.is_empty() {
            return Err(Error::invalid("runs", "at least one run is required"));
        }
        let mut runs = Vec::with_capacity(raw.runs.len());
        let mut seen_names: Vec<&str> = Vec::new();
        for r in &raw.runs {
            validate_run_name(&r.name)?;
            if seen_names.contains(&r.name.as_str()) {
                return Err(Error::invalid(
                    "runs.name",
                    format!("{:?} is used by more than one run", r.name),
                ));
            }
            seen_names.push(&r.name);
            runs.push(RunPlan {
                name: r.name.clone(),
                mode: r.mode.into(),
                schedule: build_schedule(&r.schedule)?,
                k_max: r.k_max,
                x0: r.x0.into(),
            });
        }

        let output_dir = if raw.output_dir.is_relative() {
            base_dir.join(&raw.output_dir)
        } else {
            raw.output_dir
        };

        Ok(ExperimentConfig {
            output_dir,
            nx: raw.grid.nx,
            ny: raw.grid.ny,
            spacing: raw.grid.spacing,
            supersample: raw.phantom.supersample,
            ellipses,
            geometry,
            weighting: match raw.weighting {
                WeightingConfig::Uniform => Weighting::Uniform,
                WeightingConfig::InverseVariance => Weighting::InverseVariance,
            },
            offsets,
            lambda: raw.lambda,
            noise_std: raw.noise_std,
            seed: raw.seed,
            record_wall_seconds: raw.record_wall_seconds,
            reference,
            runs,
        })
    }
}

/// Everything the solver runs share: simulated data, the reconstruction
/// operator, the regularization stack, and the one-time norm estimate.
pub struct AssembledProblem {
    /// Ground-truth phantom rasterized on the reconstruction grid.
    pub phantom: ImageGrid,
    pub data: SinogramData,
    pub a: Arc<dyn LinOp>,
    pub diff: Arc<DiffStack>,
    pub op_norm: OpNormEstimate,
    pub warnings: Vec<String>,
}

impl AssembledProblem {
    /// A fresh [`ProblemSpec`] over the shared parts (cheap: operators are
    /// reference-counted, only the sinogram vectors are copied).
    pub fn problem(&self, lambda: f64) -> Result<ProblemSpec> {
        ProblemSpec::new(
            Arc::clone(&self.a),
            self.data.clone(),
            Arc::clone(&self.diff),
            lambda,
            self.op_norm.value,
        )
    }
}

/// Builds the shared problem parts for a config: rasterizes the phantom,
/// simulates the sinogram once (on a `supersample`-times finer grid when
/// requested, so simulation and reconstruction do not share discretization),
/// and estimates the stacked operator norm once.
pub fn assemble(config: &ExperimentConfig) -> Result<AssembledProblem> {
    let ss = config.supersample;
    let sim_phantom = make_phantom(
        config.nx * ss,
        config.ny * ss,
        config.spacing / ss as f64,
        &config.ellipses,
    )?;
    let data = simulate_data(
        &sim_phantom,
        &config.geometry,
        config.noise_std,
        config.seed,
        config.weighting,
    )?;

    let phantom = if ss == 1 {
        sim_phantom
    } else {
        make_phantom(config.nx, config.ny, config.spacing, &config.ellipses)?
    };

    let a: Arc<dyn LinOp> = Arc::new(Projector::new(
        config.nx,
        config.ny,
        config.spacing,
        config.geometry.clone(),
    )?);
    let diff = Arc::new(DiffStack::new(config.nx, config.ny, config.offsets.clone())?);

    let mut warnings = Vec::new();
    let n = a.domain_len();
    let m = data.m();
    if m > n {
        warnings.push(format!(
            "m = {m} measurements exceed n = {n} unknowns; the intended regime is m <= n"
        ));
    }

    let op_norm = estimate_problem_norm(&a, &data, &diff, NORM_TOL, NORM_MAX_ITERS, NORM_SEED)?;
    if !op_norm.converged {
        warnings.push(format!(
            "operator norm estimate stopped at {} after {} iterations without meeting tolerance",
            op_norm.value, op_norm.iterations
        ));
    }

    Ok(AssembledProblem {
        phantom,
        data,
        a,
        diff,
        op_norm,
        warnings,
    })
}

/// `x⁽⁰⁾ = c·Aᵀb` with the scalar `c` minimizing `½‖A(c·Aᵀb) − b‖²_W`;
/// zero if the backprojection lies in the operator's null space.
pub fn scaled_backprojection_init(a: &Arc<dyn LinOp>, data: &SinogramData) -> Result<Vec<f64>> {
    let mut bp = apply_adjoint(a.as_ref(), &data.b)?;
    let u = apply_forward(a.as_ref(), &bp)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..u.len() {
        num += data.w[i] * u[i] * data.b[i];
        den += data.w[i] * u[i] * u[i];
    }
    let c = if den > 0.0 { num / den } else { 0.0 };
    for v in bp.iter_mut() {
        *v *= c;
    }
    Ok(bp)
}

fn initial_x(rule: InitRule, n: usize, a: &Arc<dyn LinOp>, data: &SinogramData) -> Result<Vec<f64>> {
    match rule {
        InitRule::Zero => Ok(vec![0.0; n]),
        InitRule::ScaledBackprojection => scaled_backprojection_init(a, data),
    }
}

/// Artifact paths and headline numbers for one finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub name: String,
    pub csv_path: PathBuf,
    pub image_path: PathBuf,
    pub final_normalized_cost: f64,
    pub final_rmsd: f64,
    pub warnings: Vec<String>,
}

/// What [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    /// Raw stacked-operator norm estimate (before the 1% pad).
    pub op_norm: f64,
    pub reference_path: PathBuf,
    pub reference_cost: f64,
    pub runs: Vec<RunArtifacts>,
    /// Experiment-level warnings (norm estimation, m/n regime).
    pub warnings: Vec<String>,
}

fn grid_from_values(config: &ExperimentConfig, values: Vec<f64>) -> Result<ImageGrid> {
    ImageGrid::new(config.nx, config.ny, config.spacing, values)
}

/// Executes a full experiment: simulates data, obtains the reference image,
/// runs every configured solver with metrics logging, and writes per-run
/// CSVs and images plus `phantom.bin` and `memory_ledger.txt` into the
/// output directory. Solver runs see identical inputs and execute in config
/// order; outputs are bitwise-deterministic for a fixed config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    let assembled = assemble(config)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    write_image(&out.join("phantom.bin"), &assembled.phantom)?;

    let n = assembled.a.domain_len();
    let (reference_x, reference_path) = match &config.reference {
        ReferencePolicy::Load(path) => {
            let image = read_image(path)?;
            if (image.nx, image.ny) != (config.nx, config.ny) {
                return Err(Error::bad_file(
                    path,
                    format!(
                        "reference grid {}x{} does not match configured grid {}x{}",
                        image.nx, image.ny, config.nx, config.ny
                    ),
                ));
            }
            (image.values, path.clone())
        }
        ReferencePolicy::Compute {
            mode,
            schedule,
            k_max,
        } => {
            let problem = assembled.problem(config.lambda)?;
            let run = run_solver(problem, *mode, schedule.clone(), *k_max, &vec![0.0; n], None)?;
            let path = out.join("reference.bin");
            let image = grid_from_values(config, run.state.x().to_vec())?;
            write_image(&path, &image)?;
            (image.values, path)
        }
    };

    let roi = RoiMask::inscribed_circle(config.nx, config.ny)?;
    let mut reference_cost = 0.0;
    let mut run_artifacts = Vec::with_capacity(config.runs.len());
    for plan in &config.runs {
        let problem = assembled.problem(config.lambda)?;
        let x0 = initial_x(plan.x0, n, &assembled.a, &assembled.data)?;
        let mut logger = MetricsLogger::new(
            &problem,
            &x0,
            reference_x.clone(),
            roi.clone(),
            config.record_wall_seconds,
        )?;
        reference_cost = logger.reference_cost();
        let run = run_solver(
            problem,
            plan.mode,
            plan.schedule.clone(),
            plan.k_max,
            &x0,
            Some(&mut logger),
        )?;

        let csv_path = out.join(format!("{}.csv", plan.name));
        let image_path = out.join(format!("{}.bin", plan.name));
        let record = logger.into_record();
        let last = record.rows().last().expect("record always has the k=0 row");
        let (final_normalized_cost, final_rmsd) = (last.normalized_cost, last.rmsd);
        write_metrics_csv(&csv_path, &record)?;
        write_image(&image_path, &grid_from_values(config, run.state.x().to_vec())?)?;

        run_artifacts.push(RunArtifacts {
            name: plan.name.clone(),
            csv_path,
            image_path,
            final_normalized_cost,
            final_rmsd,
            warnings: run.warnings,
        });
    }

    let ledger_text = ledger_report(n, assembled.diff.total_len(), assembled.data.m());
    let ledger_path = out.join("memory_ledger.txt");
    std::fs::write(&ledger_path, ledger_text).map_err(|e| Error::io(&ledger_path, e))?;

    Ok(ExperimentSummary {
        output_dir: out.clone(),
        op_norm: assembled.op_norm.value,
        reference_path,
        reference_cost,
        runs: run_artifacts,
        warnings: assembled.warnings,
    })
}

/// The modeled persistent-variable footprint of each algorithm at the given
/// problem dimensions, one line per algorithm plus the model's caveat.
pub fn ledger_report(n: usize, big_n: usize, m: usize) -> String {
    let mut text = format!(
        "Modeled persistent-variable footprint at n={n} (image), N={big_n} (transform), m={m} (data), 4-byte elements\n"
    );
    for algo in LedgerAlgorithm::ALL {
        let ledger = memory_ledger(algo, (n, big_n, m), 4).expect("dimensions checked positive");
        text.push_str(&ledger.to_string());
        text.push('\n');
    }
    text.push_str(
        "Counts cover persistent algorithm state only; reusable image- and data-sized\n\
         workspaces, the measured data itself, and allocator overhead are excluded.\n",
    );
    text
}
