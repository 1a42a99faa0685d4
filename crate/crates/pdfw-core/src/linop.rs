//! Matrix-free linear operators: forward/adjoint application, vertical
//! stacking, and power-iteration operator-norm estimation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A linear map `R^domain_len -> R^range_len` applied without ever forming a
/// matrix.
///
/// Implementations are immutable after construction and may be applied
/// concurrently from multiple threads. `forward_into`/`adjoint_into` are the
/// raw kernels; they assume correctly sized slices. Use [`apply_forward`] and
/// [`apply_adjoint`] when the input length is not already guaranteed.
pub trait LinOp: Send + Sync {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;

    /// Writes `op · x` into `out` (`x.len() == domain_len`, `out.len() == range_len`).
    fn forward_into(&self, x: &[f64], out: &mut [f64]);

    /// Writes `opᵀ · y` into `out` (`y.len() == range_len`, `out.len() == domain_len`).
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);
}

/// Length-checked forward application, allocating the output.
pub fn apply_forward(op: &dyn LinOp, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != op.domain_len() {
        return Err(Error::dim("forward input", op.domain_len(), x.len()));
    }
    let mut out = vec![0.0; op.range_len()];
    op.forward_into(x, &mut out);
    Ok(out)
}

/// Length-checked adjoint application, allocating the output.
pub fn apply_adjoint(op: &dyn LinOp, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != op.range_len() {
        return Err(Error::dim("adjoint input", op.range_len(), y.len()));
    }
    let mut out = vec![0.0; op.domain_len()];
    op.adjoint_into(y, &mut out);
    Ok(out)
}

/// Identity map on `R^n`.
#[derive(Debug, Clone)]
pub struct IdentityOp {
    n: usize,
}

impl IdentityOp {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl LinOp for IdentityOp {
    fn domain_len(&self) -> usize {
        self.n
    }

    fn range_len(&self) -> usize {
        self.n
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

/// Explicitly stored row-major matrix.
#[derive(Debug, Clone)]
pub struct DenseOp {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseOp {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::dim("dense entries", rows * cols, entries.len()));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

impl LinOp for DenseOp {
    fn domain_len(&self) -> usize {
        self.cols
    }

    fn range_len(&self) -> usize {
        self.rows
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, out_r) in out.iter_mut().enumerate() {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            *out_r = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (r, &y_r) in y.iter().enumerate() {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * y_r;
            }
        }
    }
}

/// `diag(scale) · inner`: every output row of `inner` multiplied by a fixed
/// positive or negative factor. Used to fold statistical weights into a
/// measurement operator (`√W · A`).
pub struct RowScaledOp {
    inner: Arc<dyn LinOp>,
    scale: Vec<f64>,
}

impl RowScaledOp {
    pub fn new(inner: Arc<dyn LinOp>, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != inner.range_len() {
            return Err(Error::dim("row scale", inner.range_len(), scale.len()));
        }
        Ok(Self { inner, scale })
    }
}

impl LinOp for RowScaledOp {
    fn domain_len(&self) -> usize {
        self.inner.domain_len()
    }

    fn range_len(&self) -> usize {
        self.inner.range_len()
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        self.inner.forward_into(x, out);
        for (o, &s) in out.iter_mut().zip(&self.scale) {
            *o *= s;
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let scaled: Vec<f64> = y.iter().zip(&self.scale).map(|(v, s)| v * s).collect();
        self.inner.adjoint_into(&scaled, out);
    }
}

/// Vertical stack `[op₁ᵀ op₂ᵀ … opₖᵀ]ᵀ` of operators sharing a domain.
///
/// Forward output concatenates the component outputs in order; the adjoint
/// sums the component adjoints.
pub struct StackedOp {
    components: Vec<Arc<dyn LinOp>>,
    domain_len: usize,
    range_len: usize,
}

impl LinOp for StackedOp {
    fn domain_len(&self) -> usize {
        self.domain_len
    }

    fn range_len(&self) -> usize {
        self.range_len
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let mut offset = 0;
        for op in &self.components {
            let len = op.range_len();
            op.forward_into(x, &mut out[offset..offset + len]);
            offset += len;
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut part = vec![0.0; self.domain_len];
        let mut offset = 0;
        for op in &self.components {
            let len = op.range_len();
            op.adjoint_into(&y[offset..offset + len], &mut part);
            for (o, p) in out.iter_mut().zip(&part) {
                *o += p;
            }
            offset += len;
        }
    }
}

/// Stacks operators vertically. Fails on an empty list or mismatched domains.
pub fn stack(ops: Vec<Arc<dyn LinOp>>) -> Result<StackedOp> {
    let first = ops
        .first()
        .ok_or_else(|| Error::invalid("stack", "component list is empty"))?;
    let domain_len = first.domain_len();
    let mut range_len = 0usize;
    for (i, op) in ops.iter().enumerate() {
        if op.domain_len() != domain_len {
            return Err(Error::invalid(
                "stack",
                format!(
                    "component {i} has domain length {}, expected {domain_len}",
                    op.domain_len()
                ),
            ));
        }
        range_len += op.range_len();
    }
    Ok(StackedOp {
        components: ops,
        domain_len,
        range_len,
    })
}

/// Result of a power-iteration spectral-norm estimate.
#[derive(Debug, Clone, Copy)]
pub struct OpNormEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Estimates `‖op‖₂` by power iteration on `opᵀop` from a seeded random start.
///
/// Stops when successive square-root Rayleigh estimates differ relatively by
/// less than `tol`. Hitting `max_iters` first returns the last estimate with
/// `converged = false`.
pub fn op_norm_estimate(
    op: &dyn LinOp,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<OpNormEstimate> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters", "must be positive"));
    }
    let n = op.domain_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = l2_norm(&v);
    if norm > 0.0 {
        v.iter_mut().for_each(|e| *e /= norm);
    }

    let mut u = vec![0.0; op.range_len()];
    let mut w = vec![0.0; n];
    let mut previous = f64::NAN;
    for iter in 1..=max_iters {
        op.forward_into(&v, &mut u);
        op.adjoint_into(&u, &mut w);
        // Rayleigh quotient of opᵀop at the unit vector v equals ‖op v‖².
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let estimate = rayleigh.max(0.0).sqrt();
        let w_norm = l2_norm(&w);
        if w_norm == 0.0 {
            // op annihilates the current direction; nothing left to amplify.
            return Ok(OpNormEstimate {
                value: estimate,
                converged: true,
                iterations: iter,
            });
        }
        if !previous.is_nan() && (estimate - previous).abs() <= tol * estimate.max(f64::MIN_POSITIVE)
        {
            return Ok(OpNormEstimate {
                value: estimate,
                converged: true,
                iterations: iter,
            });
        }
        previous = estimate;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / w_norm;
        }
    }
    Ok(OpNormEstimate {
        value: previous,
        converged: false,
        iterations: max_iters,
    })
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|e| e * e).sum::<f64>().sqrt()
}
