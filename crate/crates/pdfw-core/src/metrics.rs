//! Convergence and memory diagnostics: objective evaluation, the data-term
//! conjugate, normalized cost and region-of-interest RMSD, the per-algorithm
//! memory model, the metrics-logging observer, and the test-mode shadow-dual
//! tracker.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::reg::sign;
use crate::solver::{effective_norm, IterationObserver, ProblemSpec, SolverState, StepSchedule};

/// `½‖Ax−b‖²_W + λ‖Dx‖₁`, with the penalty accumulated blockwise (no
/// transform-space vector is formed).
pub fn cost_value(problem: &ProblemSpec, x: &[f64]) -> Result<f64> {
    let ax = crate::linop::apply_forward(&*problem.a, x)?;
    let mut datafit = 0.0;
    for i in 0..ax.len() {
        let r = ax[i] - problem.data.b[i];
        datafit += problem.data.w[i] * (r * r);
    }
    Ok(0.5 * datafit + problem.lambda * problem.diff.reg_value(x)?)
}

/// The convex conjugate of the data term at `t`:
/// `g*(t) = ½‖t+Wb‖²_{W⁻¹} − ½‖b‖²_W`, evaluated in the expanded form
/// `⟨t, b⟩ + ½Σ t_i²/w_i`, which is algebraically identical and makes
/// `g*(0) = 0` exact.
pub fn datafit_conjugate(problem: &ProblemSpec, t: &[f64]) -> Result<f64> {
    if t.len() != problem.m() {
        return Err(Error::dim("t", problem.m(), t.len()));
    }
    let mut value = 0.0;
    for i in 0..t.len() {
        value += t[i] * problem.data.b[i] + 0.5 * t[i] * t[i] / problem.data.w[i];
    }
    Ok(value)
}

/// Relative objective excess `(cost_k − cost_ref)/cost_ref`. A negative
/// result means the iterate beat the reference and is returned unclamped.
pub fn normalized_cost(cost_k: f64, cost_ref: f64) -> Result<f64> {
    if !(cost_ref > 0.0) {
        return Err(Error::invalid("cost_ref", "must be positive"));
    }
    Ok((cost_k - cost_ref) / cost_ref)
}

/// An index subset of the image used by RMSD.
#[derive(Debug, Clone)]
pub struct RoiMask {
    indices: Vec<usize>,
}

impl RoiMask {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("roi", "index set is empty"));
        }
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n {
                return Err(Error::invalid("roi", format!("index {i} out of range {n}")));
            }
            if seen[i] {
                return Err(Error::invalid("roi", format!("index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(Self { indices })
    }

    /// Pixels whose centers fall inside the circle inscribed in the grid
    /// rectangle, the 2D analog of a cylindrical region of interest.
    pub fn inscribed_circle(nx: usize, ny: usize) -> Result<Self> {
        let r = 0.5 * nx.min(ny) as f64;
        let cx = 0.5 * nx as f64;
        let cy = 0.5 * ny as f64;
        let mut indices = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let dx = ix as f64 + 0.5 - cx;
                let dy = iy as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    indices.push(iy * nx + ix);
                }
            }
        }
        Self::new(indices, nx * ny)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Root-mean-square deviation between two images over a region of interest.
pub fn rmsd(x: &[f64], x_ref: &[f64], roi: &RoiMask) -> Result<f64> {
    if x.len() != x_ref.len() {
        return Err(Error::dim("x_ref", x.len(), x_ref.len()));
    }
    let mut sum = 0.0;
    for &i in roi.indices() {
        if i >= x.len() {
            return Err(Error::invalid("roi", format!("index {i} out of range {}", x.len())));
        }
        let d = x[i] - x_ref[i];
        sum += d * d;
    }
    Ok((sum / roi.len() as f64).sqrt())
}

/// Algorithms covered by the memory model. LALM appears for comparison only;
/// it is not implemented by this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerAlgorithm {
    Lalm,
    Pdcp,
    PdfwTheta1,
    PdfwTheta0,
}

impl LedgerAlgorithm {
    pub fn label(self) -> &'static str {
        match self {
            LedgerAlgorithm::Lalm => "LALM",
            LedgerAlgorithm::Pdcp => "PDCP",
            LedgerAlgorithm::PdfwTheta1 => "PDFW theta=1",
            LedgerAlgorithm::PdfwTheta0 => "PDFW theta=0",
        }
    }

    pub const ALL: [LedgerAlgorithm; 4] = [
        LedgerAlgorithm::Lalm,
        LedgerAlgorithm::Pdcp,
        LedgerAlgorithm::PdfwTheta1,
        LedgerAlgorithm::PdfwTheta0,
    ];
}

impl std::str::FromStr for LedgerAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lalm" => Ok(LedgerAlgorithm::Lalm),
            "pdcp" => Ok(LedgerAlgorithm::Pdcp),
            "pdfw-theta1" => Ok(LedgerAlgorithm::PdfwTheta1),
            "pdfw-theta0" => Ok(LedgerAlgorithm::PdfwTheta0),
            other => Err(Error::invalid(
                "algorithm",
                format!("unknown label {other:?} (expected lalm, pdcp, pdfw-theta1, or pdfw-theta0)"),
            )),
        }
    }
}

/// Modeled per-algorithm memory footprint: how many persistent variables of
/// each size class the algorithm keeps, and the resulting byte total for
/// given dimensions.
///
/// The totals model persistent algorithm variables only. Runtime workspace,
/// the measured data itself, and allocator overhead are excluded, so real
/// processes run larger than the modeled figure.
#[derive(Debug, Clone, Copy)]
pub struct MemoryLedger {
    pub algorithm: LedgerAlgorithm,
    pub image_count: usize,
    pub transform_count: usize,
    pub data_count: usize,
    pub n: usize,
    pub big_n: usize,
    pub m: usize,
    pub element_bytes: usize,
}

impl MemoryLedger {
    pub fn total_bytes(&self) -> u64 {
        self.element_bytes as u64
            * (self.image_count as u64 * self.n as u64
                + self.transform_count as u64 * self.big_n as u64
                + self.data_count as u64 * self.m as u64)
    }
}

impl std::fmt::Display for MemoryLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<14} image={} transform={} data={} total_bytes={}",
            self.algorithm.label(),
            self.image_count,
            self.transform_count,
            self.data_count,
            self.total_bytes()
        )
    }
}

/// Variable counts per algorithm for dimensions `(n, N, m)` at the given
/// element width (4 bytes models single-precision deployment; the solvers
/// here compute in doubles).
pub fn memory_ledger(
    algorithm: LedgerAlgorithm,
    dims: (usize, usize, usize),
    element_bytes: usize,
) -> Result<MemoryLedger> {
    let (n, big_n, m) = dims;
    if n == 0 || big_n == 0 || m == 0 {
        return Err(Error::invalid("dims", "n, N, m must all be positive"));
    }
    if element_bytes == 0 {
        return Err(Error::invalid("element_bytes", "must be positive"));
    }
    let (image_count, transform_count, data_count) = match algorithm {
        LedgerAlgorithm::Lalm => (4, 2, 2),
        LedgerAlgorithm::Pdcp => (2, 1, 2),
        LedgerAlgorithm::PdfwTheta1 => (3, 0, 2),
        LedgerAlgorithm::PdfwTheta0 => (2, 0, 2),
    };
    Ok(MemoryLedger {
        algorithm,
        image_count,
        transform_count,
        data_count,
        n,
        big_n,
        m,
        element_bytes,
    })
}

/// One sampled iteration of a convergence log.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceRow {
    pub k: usize,
    pub cost: f64,
    pub normalized_cost: f64,
    pub rmsd: f64,
    pub wall_seconds: f64,
}

/// Rows of `(k, cost, normalized_cost, rmsd, wall_seconds)`, strictly
/// increasing in `k`.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceRecord {
    rows: Vec<ConvergenceRow>,
}

impl ConvergenceRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ConvergenceRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.k <= last.k {
                return Err(Error::invalid(
                    "record",
                    format!("iteration {} does not increase past {}", row.k, last.k),
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ConvergenceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Observer that logs cost, normalized cost, and ROI RMSD against a fixed
/// reference image every iteration, starting with a `k = 0` row for the
/// initial point.
///
/// Wall-clock capture is opt-in because timed columns break bitwise
/// reproducibility of the emitted CSV; when disabled the column is 0.
pub struct MetricsLogger {
    reference_x: Vec<f64>,
    reference_cost: f64,
    roi: RoiMask,
    record: ConvergenceRecord,
    record_wall: bool,
    start: Instant,
}

impl MetricsLogger {
    pub fn new(
        problem: &ProblemSpec,
        x0: &[f64],
        reference_x: Vec<f64>,
        roi: RoiMask,
        record_wall: bool,
    ) -> Result<Self> {
        if reference_x.len() != problem.n() {
            return Err(Error::dim("reference image", problem.n(), reference_x.len()));
        }
        let reference_cost = cost_value(problem, &reference_x)?;
        if !(reference_cost > 0.0) {
            return Err(Error::invalid(
                "reference",
                format!("reference cost {reference_cost} must be positive for normalization"),
            ));
        }
        let mut logger = Self {
            reference_x,
            reference_cost,
            roi,
            record: ConvergenceRecord::new(),
            record_wall,
            start: Instant::now(),
        };
        let row = logger.measure(0, x0, problem)?;
        logger.record.push(row)?;
        Ok(logger)
    }

    pub fn reference_cost(&self) -> f64 {
        self.reference_cost
    }

    fn measure(&self, k: usize, x: &[f64], problem: &ProblemSpec) -> Result<ConvergenceRow> {
        let cost = cost_value(problem, x)?;
        Ok(ConvergenceRow {
            k,
            cost,
            normalized_cost: normalized_cost(cost, self.reference_cost)?,
            rmsd: rmsd(x, &self.reference_x, &self.roi)?,
            wall_seconds: if self.record_wall {
                self.start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    pub fn record(&self) -> &ConvergenceRecord {
        &self.record
    }

    pub fn into_record(self) -> ConvergenceRecord {
        self.record
    }
}

impl IterationObserver for MetricsLogger {
    fn after_iteration(
        &mut self,
        state: &SolverState,
        problem: &ProblemSpec,
    ) -> std::result::Result<(), String> {
        let row = self
            .measure(state.k(), state.x(), problem)
            .map_err(|e| e.to_string())?;
        self.record.push(row).map_err(|e| e.to_string())
    }
}

/// Test-mode observer for PDFW runs: replays the per-block dual recursion
/// `y ← (1−α_k)y + α_k·λ·sign(D x̄⁽ᵏ⁾)` with its own length-N storage and
/// asserts after every iteration that the solver's z stays the image-space
/// aggregate of a feasible dual point:
/// `‖z − Dᵀy‖∞ ≤ 1e-10` and `‖y‖∞ ≤ λ(1+1e-12)`.
pub struct ShadowDualTracker {
    schedule: StepSchedule,
    lambda: f64,
    l_eff: f64,
    y: Vec<f64>,
    prev_x_bar: Vec<f64>,
    dty: Vec<f64>,
}

impl ShadowDualTracker {
    /// Snapshots λ, the schedule, and the padded norm at construction; the
    /// replay is driven entirely by those and the observed iterates, so a
    /// solver drifting from its declared parameters cannot fool the check.
    pub fn new(problem: &ProblemSpec, schedule: StepSchedule, x0: &[f64]) -> Result<Self> {
        if x0.len() != problem.n() {
            return Err(Error::dim("x0", problem.n(), x0.len()));
        }
        Ok(Self {
            schedule,
            lambda: problem.lambda,
            l_eff: effective_norm(problem.op_norm),
            y: vec![0.0; problem.diff.total_len()],
            prev_x_bar: x0.to_vec(),
            dty: vec![0.0; problem.n()],
        })
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }
}

impl IterationObserver for ShadowDualTracker {
    fn after_iteration(
        &mut self,
        state: &SolverState,
        problem: &ProblemSpec,
    ) -> std::result::Result<(), String> {
        let k_done = state.k();
        let alpha = self.schedule.eval(k_done - 1, self.l_eff).alpha;
        let lambda = self.lambda;
        let diff = &problem.diff;

        // advance the shadow dual with the x̄ the solver consumed this iteration
        let prev = &self.prev_x_bar;
        let keep = 1.0 - alpha;
        let mut offset = 0;
        for block in 0..diff.num_blocks() {
            let len = diff.block_len(block);
            let y_block = &mut self.y[offset..offset + len];
            diff.for_each_pair(block, |row, p, q| {
                y_block[row] = keep * y_block[row] + alpha * lambda * sign(prev[q] - prev[p]);
            });
            offset += len;
        }

        // feasibility: y must stay inside the λ-∞-ball
        let mut worst = 0.0f64;
        let mut worst_idx = 0;
        for (i, &yi) in self.y.iter().enumerate() {
            if yi.abs() > worst {
                worst = yi.abs();
                worst_idx = i;
            }
        }
        if worst > lambda * (1.0 + 1e-12) {
            return Err(format!(
                "iteration {k_done}: dual coordinate {worst_idx} escaped the ball (|y| = {worst:.17e} > lambda = {lambda:.17e})"
            ));
        }

        // aggregation: the solver's z must match Dᵀy
        self.dty.fill(0.0);
        let mut offset = 0;
        for block in 0..diff.num_blocks() {
            let y_block = &self.y[offset..offset + diff.block_len(block)];
            diff.for_each_pair(block, |row, p, q| {
                self.dty[q] += y_block[row];
                self.dty[p] -= y_block[row];
            });
            offset += diff.block_len(block);
        }
        let z = state.z();
        let mut dev = 0.0f64;
        let mut dev_idx = 0;
        for j in 0..z.len() {
            let d = (z[j] - self.dty[j]).abs();
            if d > dev {
                dev = d;
                dev_idx = j;
            }
        }
        if dev > 1e-10 {
            return Err(format!(
                "iteration {k_done}: z deviates from the aggregated dual by {dev:.3e} at coordinate {dev_idx}"
            ));
        }

        self.prev_x_bar.copy_from_slice(state.x_bar());
        Ok(())
    }
}
