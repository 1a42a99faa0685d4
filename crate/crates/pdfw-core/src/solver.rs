//! Primal-dual solvers for `½‖Ax−b‖²_W + λ‖Dx‖₁`: the memory-lean
//! conditional-gradient iteration (PDFW), a Chambolle-Pock reference mode
//! (PDCP) that stores the full transform-space dual, step-size schedules with
//! a numerical condition checker, and the outer run loop.

use std::sync::Arc;

use crate::ct::SinogramData;
use crate::error::{Error, Result};
use crate::linop::{op_norm_estimate, stack, LinOp, OpNormEstimate, RowScaledOp};
use crate::reg::DiffStack;

/// A scalar step-size rule: either a constant or the decaying power form
/// `(c/(c+k))^p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Constant(f64),
    Power { c: f64, p: f64 },
}

impl StepRule {
    fn eval(&self, k: usize) -> f64 {
        match *self {
            StepRule::Constant(c) => c,
            StepRule::Power { c, p } => (c / (c + k as f64)).powf(p),
        }
    }
}

/// Rule for the dual step σ_k; `InverseTauLSquared` couples it to τ_k as
/// `σ_k = 1/(L²τ_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaRule {
    Constant(f64),
    Power { c: f64, p: f64 },
    InverseTauLSquared,
}

/// Step sizes for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub tau: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub theta: f64,
}

/// A step-size schedule: the two presets, or a custom rule triple plus θ.
///
/// S1: τ_k = 2/(2+k), σ_k = 1/(L²τ_k), α_k = (2/(2+k))^0.49, θ = 0. The
/// diminishing schedule covered by the convergence conditions that
/// [`validate_schedule`] samples.
/// S2: τ_k = σ_k = 1/L, α_k = 2/(2+k), θ = 1. Constant steps with
/// over-relaxation, an empirical mode with no convergence guarantee here.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    S1,
    S2,
    Custom {
        tau: StepRule,
        sigma: SigmaRule,
        alpha: StepRule,
        theta: f64,
    },
}

impl StepSchedule {
    /// Builds a custom schedule, rejecting rules that could ever produce
    /// τ_k ≤ 0, σ_k ≤ 0, α_k outside [0,1], or θ outside [0,1].
    pub fn custom(tau: StepRule, sigma: SigmaRule, alpha: StepRule, theta: f64) -> Result<Self> {
        match tau {
            StepRule::Constant(c) if !(c > 0.0 && c.is_finite()) => {
                return Err(Error::invalid("tau", "constant must be positive and finite"));
            }
            StepRule::Power { c, p } if !(c > 0.0 && c.is_finite() && p.is_finite()) => {
                return Err(Error::invalid("tau", "power rule needs c > 0 and finite p"));
            }
            _ => {}
        }
        match sigma {
            SigmaRule::Constant(c) if !(c > 0.0 && c.is_finite()) => {
                return Err(Error::invalid("sigma", "constant must be positive and finite"));
            }
            SigmaRule::Power { c, p } if !(c > 0.0 && c.is_finite() && p.is_finite()) => {
                return Err(Error::invalid("sigma", "power rule needs c > 0 and finite p"));
            }
            _ => {}
        }
        match alpha {
            StepRule::Constant(c) if !(0.0..=1.0).contains(&c) => {
                return Err(Error::invalid("alpha", "constant must lie in [0, 1]"));
            }
            StepRule::Power { c, p } if !(c > 0.0 && c.is_finite() && p >= 0.0 && p.is_finite()) => {
                return Err(Error::invalid(
                    "alpha",
                    "power rule needs c > 0 and p >= 0 to stay inside [0, 1]",
                ));
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::invalid("theta", "must lie in [0, 1]"));
        }
        Ok(StepSchedule::Custom {
            tau,
            sigma,
            alpha,
            theta,
        })
    }

    /// Step sizes at iteration `k` for operator norm `l_norm`.
    pub fn eval(&self, k: usize, l_norm: f64) -> StepSizes {
        debug_assert!(l_norm > 0.0);
        match self {
            StepSchedule::S1 => {
                let tau = 2.0 / (2.0 + k as f64);
                StepSizes {
                    tau,
                    sigma: 1.0 / (l_norm * l_norm * tau),
                    alpha: (2.0 / (2.0 + k as f64)).powf(0.49),
                    theta: 0.0,
                }
            }
            StepSchedule::S2 => StepSizes {
                tau: 1.0 / l_norm,
                sigma: 1.0 / l_norm,
                alpha: 2.0 / (2.0 + k as f64),
                theta: 1.0,
            },
            StepSchedule::Custom {
                tau,
                sigma,
                alpha,
                theta,
            } => {
                let tau_k = tau.eval(k);
                let sigma_k = match *sigma {
                    SigmaRule::Constant(c) => c,
                    SigmaRule::Power { c, p } => StepRule::Power { c, p }.eval(k),
                    SigmaRule::InverseTauLSquared => 1.0 / (l_norm * l_norm * tau_k),
                };
                StepSizes {
                    tau: tau_k,
                    sigma: sigma_k,
                    alpha: alpha.eval(k),
                    theta: *theta,
                }
            }
        }
    }

    pub fn theta(&self) -> f64 {
        match self {
            StepSchedule::S1 => 0.0,
            StepSchedule::S2 => 1.0,
            StepSchedule::Custom { theta, .. } => *theta,
        }
    }

    /// For constant-step schedules, the (τ, σ) pair they use; None if either
    /// step varies with k.
    fn constant_tau_sigma(&self, l_norm: f64) -> Option<(f64, f64)> {
        match self {
            StepSchedule::S1 => None,
            StepSchedule::S2 => Some((1.0 / l_norm, 1.0 / l_norm)),
            StepSchedule::Custom { tau, sigma, .. } => match (tau, sigma) {
                (StepRule::Constant(t), SigmaRule::Constant(s)) => Some((*t, *s)),
                _ => None,
            },
        }
    }
}

/// Three sampled values of one convergence-condition quantity and whether
/// they strictly decrease across the checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct ConditionSamples {
    pub values: [f64; 3],
    pub decreasing: bool,
}

impl ConditionSamples {
    fn from(values: [f64; 3]) -> Self {
        Self {
            values,
            decreasing: values[0] > values[1] && values[1] > values[2],
        }
    }
}

/// Numerical samples of the four step-size convergence conditions at the
/// checkpoints `{K/10, K/2, K}`. A diagnostic, not a proof: decay of the two
/// weighted sums is sampled, never established in the limit.
#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub checkpoints: [usize; 3],
    /// τ_k itself; `decreasing` signals τ_k → 0 behavior.
    pub tau: ConditionSamples,
    /// Σ_{j≤k} τ_j; expected to keep growing (`decreasing` false) when the
    /// divergent-sum condition holds.
    pub tau_partial_sum: ConditionSamples,
    /// Σ_{j=1}^k τ_{j−1} Π_{i=j}^k (1−α_i).
    pub alpha_double_sum: ConditionSamples,
    /// Σ_{j=1}^k τ_{j−1} Π_{i=j}^k 1/(1+σ_i).
    pub sigma_double_sum: ConditionSamples,
}

impl std::fmt::Display for ScheduleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<22} {:>14} {:>14} {:>14}   decreasing",
            "condition", self.checkpoints[0], self.checkpoints[1], self.checkpoints[2]
        )?;
        for (name, cond) in [
            ("tau_k", &self.tau),
            ("sum tau_j, j<=k", &self.tau_partial_sum),
            ("alpha double sum", &self.alpha_double_sum),
            ("sigma double sum", &self.sigma_double_sum),
        ] {
            writeln!(
                f,
                "{:<22} {:>14.6e} {:>14.6e} {:>14.6e}   {}",
                name, cond.values[0], cond.values[1], cond.values[2], cond.decreasing
            )?;
        }
        Ok(())
    }
}

/// Samples the convergence conditions of a schedule over the horizon `K`.
///
/// The two weighted sums are evaluated by the forward recurrences
/// `S_k = (1−α_k)(S_{k−1} + τ_{k−1})` and `T_k = (T_{k−1} + τ_{k−1})/(1+σ_k)`
/// (both start at 0), which are exact rearrangements of the double sums and
/// numerically stable for long horizons.
pub fn validate_schedule(schedule: &StepSchedule, l_norm: f64, horizon: usize) -> Result<ScheduleReport> {
    if !(l_norm > 0.0) {
        return Err(Error::invalid("l_norm", "must be positive"));
    }
    if horizon < 10 {
        return Err(Error::invalid("horizon", "must be at least 10"));
    }
    let checkpoints = [horizon / 10, horizon / 2, horizon];
    let mut tau_samples = [0.0; 3];
    let mut sum_samples = [0.0; 3];
    let mut s_samples = [0.0; 3];
    let mut t_samples = [0.0; 3];

    let mut tau_prev = schedule.eval(0, l_norm).tau;
    let mut partial_sum = tau_prev;
    let mut s = 0.0;
    let mut t = 0.0;
    for k in 1..=horizon {
        let steps = schedule.eval(k, l_norm);
        s = (1.0 - steps.alpha) * (s + tau_prev);
        t = (t + tau_prev) / (1.0 + steps.sigma);
        partial_sum += steps.tau;
        tau_prev = steps.tau;
        if let Some(slot) = checkpoints.iter().position(|&c| c == k) {
            tau_samples[slot] = steps.tau;
            sum_samples[slot] = partial_sum;
            s_samples[slot] = s;
            t_samples[slot] = t;
        }
    }
    Ok(ScheduleReport {
        checkpoints,
        tau: ConditionSamples::from(tau_samples),
        tau_partial_sum: ConditionSamples::from(sum_samples),
        alpha_double_sum: ConditionSamples::from(s_samples),
        sigma_double_sum: ConditionSamples::from(t_samples),
    })
}

/// A fully assembled problem instance: measurement operator, data and
/// weights, regularization stack, penalty weight, and the operator-norm
/// estimate of the stacked map `[√W·A; D₁; …; D_ℓ]` that step sizes key off.
pub struct ProblemSpec {
    pub a: Arc<dyn LinOp>,
    pub data: SinogramData,
    pub diff: Arc<DiffStack>,
    pub lambda: f64,
    pub op_norm: f64,
}

impl ProblemSpec {
    pub fn new(
        a: Arc<dyn LinOp>,
        data: SinogramData,
        diff: Arc<DiffStack>,
        lambda: f64,
        op_norm: f64,
    ) -> Result<Self> {
        if a.range_len() != data.m() {
            return Err(Error::dim("operator range", data.m(), a.range_len()));
        }
        if a.domain_len() != diff.domain_len() {
            return Err(Error::dim(
                "regularization domain",
                a.domain_len(),
                diff.domain_len(),
            ));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be positive and finite"));
        }
        if !(op_norm > 0.0 && op_norm.is_finite()) {
            return Err(Error::invalid("op_norm", "must be positive and finite"));
        }
        Ok(Self {
            a,
            data,
            diff,
            lambda,
            op_norm,
        })
    }

    pub fn n(&self) -> usize {
        self.a.domain_len()
    }

    pub fn m(&self) -> usize {
        self.a.range_len()
    }
}

/// Power-iteration estimate of `‖[√W·A; D₁; …; D_ℓ]‖₂` for a problem's parts.
pub fn estimate_problem_norm(
    a: &Arc<dyn LinOp>,
    data: &SinogramData,
    diff: &Arc<DiffStack>,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<OpNormEstimate> {
    let sqrt_w: Vec<f64> = data.w.iter().map(|w| w.sqrt()).collect();
    let mut ops: Vec<Arc<dyn LinOp>> =
        vec![Arc::new(RowScaledOp::new(Arc::clone(a), sqrt_w)?)];
    for block in 0..diff.num_blocks() {
        ops.push(Arc::new(diff.block_op(block)?));
    }
    let stacked = stack(ops)?;
    op_norm_estimate(&stacked, tol, max_iters, seed)
}

/// The norm value fed into schedule evaluation: the raw estimate padded by
/// 1%, so a slightly-low power-iteration result cannot push constant-step
/// modes over the stability boundary.
pub fn effective_norm(op_norm: f64) -> f64 {
    1.01 * op_norm
}

/// Which z-update the iteration uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// Conditional-gradient dual: z is the only dual surrogate kept in image
    /// space; nothing of transform-space size is stored.
    Pdfw,
    /// Projection dual: stores the full transform-space dual `s` (length N)
    /// and sets z = Dᵀs each iteration.
    Pdcp,
}

/// Live solver memory: the primal iterate, its extrapolation (only when
/// θ ≠ 0), the image-space dual surrogate z, the measurement-space dual t,
/// the PDCP-mode transform dual s (only in that mode), and the count of
/// completed iterations.
#[derive(Debug, Clone)]
pub struct SolverState {
    x: Vec<f64>,
    x_bar: Option<Vec<f64>>,
    z: Vec<f64>,
    t: Vec<f64>,
    s: Option<Vec<f64>>,
    k: usize,
}

impl SolverState {
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// The extrapolated iterate; identical to `x` (same slice) when θ = 0.
    pub fn x_bar(&self) -> &[f64] {
        self.x_bar.as_deref().unwrap_or(&self.x)
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    /// The stored transform-space dual; None outside PDCP mode.
    pub fn s(&self) -> Option<&[f64]> {
        self.s.as_deref()
    }

    /// Completed iterations.
    pub fn k(&self) -> usize {
        self.k
    }
}

#[inline]
fn t_update_entry(t_i: f64, ax_i: f64, b_i: f64, w_i: f64, denom: f64, scale: f64) -> f64 {
    t_i / denom + scale * (w_i * (ax_i - b_i))
}

#[inline]
fn x_update_entry(x_j: f64, at_j: f64, z_j: f64, tau: f64) -> f64 {
    x_j - tau * (at_j + z_j)
}

#[inline]
fn over_relax_entry(x_new: f64, x_old: f64, theta: f64) -> f64 {
    x_new + theta * (x_new - x_old)
}

/// `t⁺ = t/(1+σ) + σ/(1+σ)·W(Ax̄ − b)`: the closed-form proximal dual update
/// of the data term under the W⁻¹ metric.
pub fn pdfw_t_update(t: &[f64], x_bar: &[f64], sigma: f64, problem: &ProblemSpec) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", "must be positive"));
    }
    if t.len() != problem.m() {
        return Err(Error::dim("t", problem.m(), t.len()));
    }
    let ax = crate::linop::apply_forward(&*problem.a, x_bar)?;
    let denom = 1.0 + sigma;
    let scale = sigma / denom;
    Ok((0..t.len())
        .map(|i| {
            t_update_entry(
                t[i],
                ax[i],
                problem.data.b[i],
                problem.data.w[i],
                denom,
                scale,
            )
        })
        .collect())
}

/// `z⁺ = (1−α)z + α·λ·Σᵢ D_iᵀ sign(D_i x̄)`: the conditional-gradient dual
/// update, accumulated blockwise with no transform-space storage.
pub fn pdfw_z_update(z: &[f64], x_bar: &[f64], alpha: f64, problem: &ProblemSpec) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", "must lie in [0, 1]"));
    }
    if z.len() != problem.n() {
        return Err(Error::dim("z", problem.n(), z.len()));
    }
    if x_bar.len() != problem.n() {
        return Err(Error::dim("x_bar", problem.n(), x_bar.len()));
    }
    let mut out = z.to_vec();
    if alpha != 0.0 {
        let keep = 1.0 - alpha;
        for v in out.iter_mut() {
            *v *= keep;
        }
        problem
            .diff
            .fw_direction_scaled_add(x_bar, alpha * problem.lambda, &mut out);
    }
    Ok(out)
}

/// `x⁺ = x − τ(Aᵀt⁺ + z⁺)`: the primal gradient step.
pub fn pdfw_x_update(
    x: &[f64],
    z_new: &[f64],
    t_new: &[f64],
    tau: f64,
    problem: &ProblemSpec,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", "must be positive"));
    }
    if x.len() != problem.n() || z_new.len() != problem.n() {
        return Err(Error::dim("x", problem.n(), x.len().min(z_new.len())));
    }
    let at = crate::linop::apply_adjoint(&*problem.a, t_new)?;
    Ok((0..x.len())
        .map(|j| x_update_entry(x[j], at[j], z_new[j], tau))
        .collect())
}

/// `x̄⁺ = x⁺ + θ(x⁺ − x)`. With θ = 0 the result is `x⁺` itself, and the
/// solver keeps no separate x̄ buffer in that mode.
pub fn over_relax(x_new: &[f64], x_old: &[f64], theta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid("theta", "must lie in [0, 1]"));
    }
    if x_new.len() != x_old.len() {
        return Err(Error::dim("x_old", x_new.len(), x_old.len()));
    }
    Ok(x_new
        .iter()
        .zip(x_old)
        .map(|(&xn, &xo)| over_relax_entry(xn, xo, theta))
        .collect())
}

/// The projection dual update: `s⁺ = clamp(s + σ·Dx̄, ±λ)` entrywise, then
/// `z⁺ = Dᵀs⁺`. Deliberately stores and returns the length-N dual.
pub fn pdcp_z_update(
    s: &[f64],
    x_bar: &[f64],
    sigma: f64,
    problem: &ProblemSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", "must be positive"));
    }
    if s.len() != problem.diff.total_len() {
        return Err(Error::dim("s", problem.diff.total_len(), s.len()));
    }
    if x_bar.len() != problem.n() {
        return Err(Error::dim("x_bar", problem.n(), x_bar.len()));
    }
    let mut s_new = s.to_vec();
    let mut z_new = vec![0.0; problem.n()];
    pdcp_update_blocks(&problem.diff, &mut s_new, x_bar, sigma, problem.lambda, &mut z_new);
    Ok((s_new, z_new))
}

/// Shared PDCP kernel: updates `s` in place and writes `z = Dᵀs` (zeroed
/// first), one streaming pass per block.
fn pdcp_update_blocks(
    diff: &DiffStack,
    s: &mut [f64],
    x_bar: &[f64],
    sigma: f64,
    lambda: f64,
    z: &mut [f64],
) {
    z.fill(0.0);
    let mut offset = 0;
    for block in 0..diff.num_blocks() {
        let len = diff.block_len(block);
        let s_block = &mut s[offset..offset + len];
        diff.for_each_pair(block, |row, p, q| {
            let v = (s_block[row] + sigma * (x_bar[q] - x_bar[p])).clamp(-lambda, lambda);
            s_block[row] = v;
            z[q] += v;
            z[p] -= v;
        });
        offset += len;
    }
}

/// Callback invoked after every completed iteration. Returning an error
/// string aborts the run with an observer-check failure naming the iteration.
pub trait IterationObserver {
    fn after_iteration(
        &mut self,
        state: &SolverState,
        problem: &ProblemSpec,
    ) -> std::result::Result<(), String>;
}

/// Live buffer inventory of a solver run, grouped by the space each buffer
/// lives in and measured from actual vector lengths. Includes operator
/// workspace, so the image/data groups run larger than the variable counts
/// in the diagnostics ledger model, which counts persistent algorithm
/// variables only.
#[derive(Debug, Clone)]
pub struct AllocationReport {
    pub image_sized: Vec<(&'static str, usize)>,
    pub data_sized: Vec<(&'static str, usize)>,
    pub transform_sized: Vec<(&'static str, usize)>,
    /// High-water mark of reusable transform-space scratch. The streaming
    /// difference kernels need none, so this is 0 in every mode.
    pub transform_scratch_peak: usize,
}

/// Step engine: owns the problem and state, advances one iteration per
/// `step()` call in the fixed order t-update, z-update, x-update,
/// over-relaxation.
pub struct SolverDriver {
    problem: ProblemSpec,
    mode: SolverMode,
    schedule: StepSchedule,
    state: SolverState,
    tmp_m: Vec<f64>,
    tmp_n: Vec<f64>,
    effective_norm: f64,
    warnings: Vec<String>,
}

impl SolverDriver {
    pub fn new(
        problem: ProblemSpec,
        mode: SolverMode,
        schedule: StepSchedule,
        x0: &[f64],
    ) -> Result<Self> {
        let n = problem.n();
        let m = problem.m();
        if x0.len() != n {
            return Err(Error::dim("x0", n, x0.len()));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x0", "entries must be finite"));
        }
        let effective_norm = effective_norm(problem.op_norm);
        let mut warnings = Vec::new();
        if mode == SolverMode::Pdcp {
            if let Some((tau, sigma)) = schedule.constant_tau_sigma(effective_norm) {
                let product = tau * sigma * problem.op_norm * problem.op_norm;
                if product >= 1.0 {
                    warnings.push(format!(
                        "pdcp constant-step product tau*sigma*L^2 = {product:.6} >= 1; \
                         convergence is not guaranteed"
                    ));
                }
            }
        }
        let theta = schedule.theta();
        let state = SolverState {
            x: x0.to_vec(),
            x_bar: (theta != 0.0).then(|| x0.to_vec()),
            z: vec![0.0; n],
            t: vec![0.0; m],
            s: (mode == SolverMode::Pdcp).then(|| vec![0.0; problem.diff.total_len()]),
            k: 0,
        };
        Ok(Self {
            problem,
            mode,
            schedule,
            state,
            tmp_m: vec![0.0; m],
            tmp_n: vec![0.0; n],
            effective_norm,
            warnings,
        })
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    pub fn mode(&self) -> SolverMode {
        self.mode
    }

    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn into_state(self) -> SolverState {
        self.state
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Step sizes the next `step()` call will use.
    pub fn next_steps(&self) -> StepSizes {
        self.schedule.eval(self.state.k, self.effective_norm)
    }

    /// Runs one iteration: t-update, z-update (by mode), x-update,
    /// over-relaxation, then a finiteness sweep over the state.
    pub fn step(&mut self) -> Result<()> {
        let steps = self.next_steps();
        let iteration = self.state.k;
        let Self {
            problem,
            mode,
            state,
            tmp_m,
            tmp_n,
            ..
        } = self;
        let SolverState {
            x, x_bar, z, t, s, ..
        } = state;

        // t-update: t ← t/(1+σ) + σ/(1+σ)·W(Ax̄ − b)
        {
            let xb: &[f64] = x_bar.as_deref().unwrap_or(x);
            problem.a.forward_into(xb, tmp_m);
        }
        let denom = 1.0 + steps.sigma;
        let scale = steps.sigma / denom;
        for i in 0..t.len() {
            t[i] = t_update_entry(
                t[i],
                tmp_m[i],
                problem.data.b[i],
                problem.data.w[i],
                denom,
                scale,
            );
        }

        // z-update, by mode
        {
            let xb: &[f64] = x_bar.as_deref().unwrap_or(x);
            match mode {
                SolverMode::Pdfw => {
                    if steps.alpha != 0.0 {
                        let keep = 1.0 - steps.alpha;
                        for v in z.iter_mut() {
                            *v *= keep;
                        }
                        problem
                            .diff
                            .fw_direction_scaled_add(xb, steps.alpha * problem.lambda, z);
                    }
                }
                SolverMode::Pdcp => {
                    let s = s.as_mut().expect("pdcp mode allocates s at construction");
                    pdcp_update_blocks(&problem.diff, s, xb, steps.sigma, problem.lambda, z);
                }
            }
        }

        // x-update and over-relaxation, fused into one pass
        problem.a.adjoint_into(t, tmp_n);
        match x_bar {
            Some(xb) => {
                for j in 0..x.len() {
                    let xn = x_update_entry(x[j], tmp_n[j], z[j], steps.tau);
                    xb[j] = over_relax_entry(xn, x[j], steps.theta);
                    x[j] = xn;
                }
            }
            None => {
                for j in 0..x.len() {
                    x[j] = x_update_entry(x[j], tmp_n[j], z[j], steps.tau);
                }
            }
        }

        check_finite("t", t, iteration)?;
        check_finite("z", z, iteration)?;
        check_finite("x", x, iteration)?;
        if let Some(xb) = x_bar {
            check_finite("x_bar", xb, iteration)?;
        }
        if let Some(s) = s {
            check_finite("s", s, iteration)?;
        }
        state.k += 1;
        Ok(())
    }

    /// Inventory of every live buffer, by actual length.
    pub fn allocation_report(&self) -> AllocationReport {
        let mut image_sized = vec![("x", self.state.x.len())];
        if let Some(xb) = &self.state.x_bar {
            image_sized.push(("x_bar", xb.len()));
        }
        image_sized.push(("z", self.state.z.len()));
        image_sized.push(("adjoint workspace", self.tmp_n.len()));
        let data_sized = vec![("t", self.state.t.len()), ("forward workspace", self.tmp_m.len())];
        let mut transform_sized = Vec::new();
        if let Some(s) = &self.state.s {
            transform_sized.push(("s", s.len()));
        }
        AllocationReport {
            image_sized,
            data_sized,
            transform_sized,
            transform_scratch_peak: 0,
        }
    }
}

fn check_finite(vector: &'static str, values: &[f64], iteration: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { vector, iteration })
    }
}

/// A finished run: the final state plus any warnings raised at setup.
#[derive(Debug)]
pub struct SolverRun {
    pub state: SolverState,
    pub warnings: Vec<String>,
}

/// Runs exactly `k_max` iterations from `x0` (z = 0, t = 0, x̄ = x at entry),
/// invoking the observer after each one. `k_max = 0` returns the initial
/// state untouched.
pub fn run_solver(
    problem: ProblemSpec,
    mode: SolverMode,
    schedule: StepSchedule,
    k_max: usize,
    x0: &[f64],
    mut observer: Option<&mut dyn IterationObserver>,
) -> Result<SolverRun> {
    let mut driver = SolverDriver::new(problem, mode, schedule, x0)?;
    for _ in 0..k_max {
        driver.step()?;
        if let Some(obs) = observer.as_deref_mut() {
            obs.after_iteration(&driver.state, &driver.problem)
                .map_err(|detail| Error::ObserverCheck {
                    iteration: driver.state.k,
                    detail,
                })?;
        }
    }
    let warnings = std::mem::take(&mut driver.warnings);
    Ok(SolverRun {
        state: driver.into_state(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ct::ScanGeometry;
    use crate::linop::IdentityOp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Identity measurement on an n×1 strip with one forward-difference
    /// block; b and w are caller-chosen.
    fn strip_problem(b: Vec<f64>, w: Vec<f64>, lambda: f64) -> ProblemSpec {
        let n = b.len();
        let a: Arc<dyn LinOp> = Arc::new(IdentityOp::new(n));
        let geo = ScanGeometry::uniform(1, n, 1.0).unwrap();
        let data = SinogramData::new(geo, b, w).unwrap();
        let diff = Arc::new(DiffStack::new(n, 1, vec![(1, 0)]).unwrap());
        let est = estimate_problem_norm(&a, &data, &diff, 1e-10, 5000, 11).unwrap();
        assert!(est.converged);
        ProblemSpec::new(a, data, diff, lambda, est.value).unwrap()
    }

    #[test]
    fn schedule_s1_values() {
        let s = StepSchedule::S1.eval(0, 1.0);
        assert_eq!((s.tau, s.sigma, s.alpha, s.theta), (1.0, 1.0, 1.0, 0.0));
        let s = StepSchedule::S1.eval(2, 1.0);
        assert_eq!(s.tau, 0.5);
        assert_eq!(s.sigma, 2.0);
        assert!((s.alpha - 0.5f64.powf(0.49)).abs() <= 1e-15);
    }

    #[test]
    fn schedule_s2_values() {
        for k in [0, 3, 100] {
            let s = StepSchedule::S2.eval(k, 4.0);
            assert_eq!(s.tau, 0.25);
            assert_eq!(s.sigma, 0.25);
            assert_eq!(s.alpha, 2.0 / (2.0 + k as f64));
            assert_eq!(s.theta, 1.0);
        }
    }

    #[test]
    fn custom_schedule_validation() {
        let ok = StepSchedule::custom(
            StepRule::Power { c: 2.0, p: 1.0 },
            SigmaRule::InverseTauLSquared,
            StepRule::Power { c: 2.0, p: 0.49 },
            0.0,
        )
        .unwrap();
        // this custom triple reproduces S1
        for k in [0, 1, 7, 500] {
            assert_eq!(ok.eval(k, 3.0), StepSchedule::S1.eval(k, 3.0));
        }

        assert!(StepSchedule::custom(
            StepRule::Constant(-1.0),
            SigmaRule::Constant(1.0),
            StepRule::Constant(0.5),
            0.0
        )
        .is_err());
        assert!(StepSchedule::custom(
            StepRule::Constant(1.0),
            SigmaRule::Constant(0.0),
            StepRule::Constant(0.5),
            0.0
        )
        .is_err());
        assert!(StepSchedule::custom(
            StepRule::Constant(1.0),
            SigmaRule::Constant(1.0),
            StepRule::Constant(1.5),
            0.0
        )
        .is_err());
        assert!(StepSchedule::custom(
            StepRule::Constant(1.0),
            SigmaRule::Constant(1.0),
            StepRule::Power { c: 2.0, p: -0.5 },
            0.0
        )
        .is_err());
        assert!(StepSchedule::custom(
            StepRule::Constant(1.0),
            SigmaRule::Constant(1.0),
            StepRule::Constant(0.5),
            1.5
        )
        .is_err());
    }

    #[test]
    fn t_update_examples() {
        // W = I, Ax̄ − b = 4 per entry, σ = 1: ½·0 + ½·4 = 2
        let problem = strip_problem(vec![0.0, 0.0], vec![1.0, 1.0], 1.0);
        let t = pdfw_t_update(&[0.0, 0.0], &[4.0, 4.0], 1.0, &problem).unwrap();
        assert_eq!(t, vec![2.0, 2.0]);

        // σ → 0: the prox term dominates and t barely moves
        let t = pdfw_t_update(&[5.0, -3.0], &[4.0, 4.0], 1e-12, &problem).unwrap();
        assert!((t[0] - 5.0).abs() <= 1e-10 && (t[1] + 3.0).abs() <= 1e-10);

        // W = diag(2), t = 2, σ = 3, Ax̄ − b = −1: ¼·2 + ¾·(−2) = −1
        let weighted = strip_problem(vec![0.0, 0.0], vec![2.0, 2.0], 1.0);
        let t = pdfw_t_update(&[2.0, 2.0], &[-1.0, -1.0], 3.0, &weighted).unwrap();
        assert_eq!(t, vec![-1.0, -1.0]);
    }

    #[test]
    fn z_update_examples() {
        let problem = strip_problem(vec![0.0; 3], vec![1.0; 3], 1.0);
        let z0 = [0.25, -0.5, 1.0];
        let x_bar = [0.0, 1.0, 3.0];

        let same = pdfw_z_update(&z0, &x_bar, 0.0, &problem).unwrap();
        assert_eq!(same, z0.to_vec());

        let full = pdfw_z_update(&z0, &x_bar, 1.0, &problem).unwrap();
        assert_eq!(full, vec![-1.0, 0.0, 1.0]);

        let half = pdfw_z_update(&[0.0; 3], &x_bar, 0.5, &problem).unwrap();
        assert_eq!(half, vec![-0.5, 0.0, 0.5]);
    }

    #[test]
    fn x_update_examples() {
        let problem = strip_problem(vec![0.0, 0.0], vec![1.0, 1.0], 1.0);
        let x = [1.0, 1.0];

        let unchanged = pdfw_x_update(&x, &[0.0, 0.0], &[0.0, 0.0], 0.5, &problem).unwrap();
        assert_eq!(unchanged, x.to_vec());

        let stepped = pdfw_x_update(&x, &[0.0, 0.0], &[1.0, -1.0], 0.5, &problem).unwrap();
        assert_eq!(stepped, vec![0.5, 1.5]);

        // power-of-two data keeps the displacement scaling exact
        let g_half = pdfw_x_update(&x, &[0.5, -0.25], &[0.0, 0.0], 0.5, &problem).unwrap();
        let g_one = pdfw_x_update(&x, &[0.5, -0.25], &[0.0, 0.0], 1.0, &problem).unwrap();
        for j in 0..2 {
            assert_eq!(2.0 * (x[j] - g_half[j]), x[j] - g_one[j]);
        }
    }

    #[test]
    fn over_relax_examples() {
        assert_eq!(over_relax(&[2.0], &[1.0], 0.0).unwrap(), vec![2.0]);
        assert_eq!(over_relax(&[2.0], &[1.0], 1.0).unwrap(), vec![3.0]);
        for theta in [0.0, 0.3, 1.0] {
            assert_eq!(over_relax(&[1.5], &[1.5], theta).unwrap(), vec![1.5]);
        }
    }

    #[test]
    fn pdcp_update_examples() {
        // 2-pixel strip, one difference row; λ = 1
        let problem = strip_problem(vec![0.0, 0.0], vec![1.0, 1.0], 1.0);
        // σ·Dx̄ = 2 pushes s past the ball; clamp lands on λ
        let (s_new, z_new) = pdcp_z_update(&[0.5], &[0.0, 2.0], 1.0, &problem).unwrap();
        assert_eq!(s_new, vec![1.0]);
        assert_eq!(z_new, vec![-1.0, 1.0]);
        // feasible s and zero Dx̄: projection is the identity
        let (s_same, _) = pdcp_z_update(&[0.3], &[5.0, 5.0], 2.0, &problem).unwrap();
        assert_eq!(s_same, vec![0.3]);
    }

    #[test]
    fn validator_flags() {
        // α ≡ 1 annihilates every product in the first double sum
        let all_one = StepSchedule::custom(
            StepRule::Power { c: 2.0, p: 1.0 },
            SigmaRule::Constant(1.0),
            StepRule::Constant(1.0),
            0.0,
        )
        .unwrap();
        let report = validate_schedule(&all_one, 1.0, 100).unwrap();
        assert_eq!(report.alpha_double_sum.values, [0.0; 3]);

        // constant τ: the τ_k → 0 flag stays false
        let report = validate_schedule(&StepSchedule::S2, 2.0, 1000).unwrap();
        assert!(!report.tau.decreasing);

        // S1: both double sums decay across checkpoints, partial sums grow
        let report = validate_schedule(&StepSchedule::S1, 1.0, 1000).unwrap();
        assert!(report.tau.decreasing);
        assert!(report.alpha_double_sum.decreasing);
        assert!(report.sigma_double_sum.decreasing);
        assert!(!report.tau_partial_sum.decreasing);

        assert!(validate_schedule(&StepSchedule::S1, 1.0, 9).is_err());
    }

    #[test]
    fn run_zero_iterations_returns_initial_state() {
        let problem = strip_problem(vec![1.0, 2.0, 3.0], vec![1.0; 3], 0.5);
        let x0 = [0.5, 0.5, 0.5];
        let run = run_solver(problem, SolverMode::Pdfw, StepSchedule::S2, 0, &x0, None).unwrap();
        assert_eq!(run.state.x(), &x0);
        assert_eq!(run.state.z(), &[0.0; 3]);
        assert_eq!(run.state.t(), &[0.0; 3]);
        assert_eq!(run.state.k(), 0);
        assert_eq!(run.state.x_bar(), &x0);
    }

    #[test]
    fn wls_limit_recovers_data() {
        // λ ≈ 0 reduces the objective to ½‖x − b‖²; the minimizer is b.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let problem = strip_problem(b.clone(), vec![1.0; 8], 1e-12);
        let run = run_solver(
            problem,
            SolverMode::Pdfw,
            StepSchedule::S2,
            5000,
            &[0.0; 8],
            None,
        )
        .unwrap();
        for (xi, bi) in run.state.x().iter().zip(&b) {
            assert!((xi - bi).abs() <= 1e-4, "{xi} vs {bi}");
        }
    }

    #[test]
    fn driver_matches_pure_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let problem = strip_problem(b, vec![1.0; 6], 0.7);
        let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l_eff = effective_norm(problem.op_norm);

        for (mode, schedule) in [
            (SolverMode::Pdfw, StepSchedule::S1),
            (SolverMode::Pdfw, StepSchedule::S2),
            (SolverMode::Pdcp, StepSchedule::S2),
        ] {
            let reference = strip_problem(problem.data.b.clone(), vec![1.0; 6], 0.7);
            let mut driver = SolverDriver::new(reference, mode, schedule.clone(), &x0).unwrap();
            let mut x = x0.clone();
            let mut x_bar = x0.clone();
            let mut z = vec![0.0; 6];
            let mut t = vec![0.0; 6];
            let mut s = vec![0.0; driver.problem().diff.total_len()];
            for k in 0..5 {
                driver.step().unwrap();
                let steps = schedule.eval(k, l_eff);
                t = pdfw_t_update(&t, &x_bar, steps.sigma, driver.problem()).unwrap();
                z = match mode {
                    SolverMode::Pdfw => {
                        pdfw_z_update(&z, &x_bar, steps.alpha, driver.problem()).unwrap()
                    }
                    SolverMode::Pdcp => {
                        let (s_new, z_new) =
                            pdcp_z_update(&s, &x_bar, steps.sigma, driver.problem()).unwrap();
                        s = s_new;
                        z_new
                    }
                };
                let x_new = pdfw_x_update(&x, &z, &t, steps.tau, driver.problem()).unwrap();
                x_bar = over_relax(&x_new, &x, steps.theta).unwrap();
                x = x_new;

                assert_eq!(driver.state().x(), x.as_slice(), "{mode:?} k={k}");
                assert_eq!(driver.state().x_bar(), x_bar.as_slice(), "{mode:?} k={k}");
                assert_eq!(driver.state().z(), z.as_slice(), "{mode:?} k={k}");
                assert_eq!(driver.state().t(), t.as_slice(), "{mode:?} k={k}");
                if mode == SolverMode::Pdcp {
                    assert_eq!(driver.state().s().unwrap(), s.as_slice(), "k={k}");
                }
            }
        }
    }

    #[test]
    fn state_buffers_follow_mode_and_theta() {
        let problem = strip_problem(vec![0.0; 4], vec![1.0; 4], 1.0);
        let driver =
            SolverDriver::new(problem, SolverMode::Pdfw, StepSchedule::S1, &[0.0; 4]).unwrap();
        let report = driver.allocation_report();
        assert!(report.transform_sized.is_empty());
        assert!(!report.image_sized.iter().any(|(name, _)| *name == "x_bar"));
        assert_eq!(report.transform_scratch_peak, 0);

        let problem = strip_problem(vec![0.0; 4], vec![1.0; 4], 1.0);
        let driver =
            SolverDriver::new(problem, SolverMode::Pdcp, StepSchedule::S2, &[0.0; 4]).unwrap();
        let report = driver.allocation_report();
        assert_eq!(report.transform_sized, vec![("s", 3)]);
        assert!(report.image_sized.iter().any(|(name, _)| *name == "x_bar"));
    }

    #[test]
    fn pdcp_constant_step_warning() {
        // τ = σ = 1 with L ≥ 1 violates the stability product
        let problem = strip_problem(vec![0.0; 4], vec![1.0; 4], 1.0);
        let risky = StepSchedule::custom(
            StepRule::Constant(1.0),
            SigmaRule::Constant(1.0),
            StepRule::Constant(0.5),
            1.0,
        )
        .unwrap();
        let driver = SolverDriver::new(problem, SolverMode::Pdcp, risky, &[0.0; 4]).unwrap();
        assert_eq!(driver.warnings().len(), 1);
        assert!(driver.warnings()[0].contains(">= 1"));

        // S2 sets τσ from the padded norm, which keeps the product below 1
        let problem = strip_problem(vec![0.0; 4], vec![1.0; 4], 1.0);
        let driver =
            SolverDriver::new(problem, SolverMode::Pdcp, StepSchedule::S2, &[0.0; 4]).unwrap();
        assert!(driver.warnings().is_empty());

        // PDFW mode never carries the PDCP step warning
        let problem = strip_problem(vec![0.0; 4], vec![1.0; 4], 1.0);
        let risky = StepSchedule::custom(
            StepRule::Constant(1.0),
            SigmaRule::Constant(1.0),
            StepRule::Constant(0.5),
            1.0,
        )
        .unwrap();
        let driver = SolverDriver::new(problem, SolverMode::Pdfw, risky, &[0.0; 4]).unwrap();
        assert!(driver.warnings().is_empty());
    }

    #[test]
    fn divergence_is_named() {
        let problem = strip_problem(vec![1.0; 4], vec![1.0; 4], 1.0);
        let wild = StepSchedule::custom(
            StepRule::Constant(1e12),
            SigmaRule::Constant(1.0),
            StepRule::Constant(0.5),
            0.0,
        )
        .unwrap();
        let err = run_solver(problem, SolverMode::Pdfw, wild, 200, &[0.0; 4], None).unwrap_err();
        match err {
            Error::Diverged { .. } => {}
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn observer_failure_aborts_with_iteration() {
        struct FailAtThree;
        impl IterationObserver for FailAtThree {
            fn after_iteration(
                &mut self,
                state: &SolverState,
                _problem: &ProblemSpec,
            ) -> std::result::Result<(), String> {
                if state.k() == 3 {
                    Err("synthetic check tripped".to_string())
                } else {
                    Ok(())
                }
            }
        }
        let problem = strip_problem(vec![1.0; 4], vec![1.0; 4], 1.0);
        let mut obs = FailAtThree;
        let err = run_solver(
            problem,
            SolverMode::Pdfw,
            StepSchedule::S2,
            10,
            &[0.0; 4],
            Some(&mut obs),
        )
        .unwrap_err();
        match err {
            Error::ObserverCheck { iteration, .. } => assert_eq!(iteration, 3),
            other => panic!("expected observer failure, got {other}"),
        }
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |mode| {
            let problem = strip_problem(b.clone(), vec![1.0; 10], 0.4);
            run_solver(problem, mode, StepSchedule::S1, 50, &[0.0; 10], None)
                .unwrap()
                .state
        };
        let first = run(SolverMode::Pdfw);
        let second = run(SolverMode::Pdfw);
        assert_eq!(first.x(), second.x());
        assert_eq!(first.z(), second.z());
        assert_eq!(first.t(), second.t());
    }
}
