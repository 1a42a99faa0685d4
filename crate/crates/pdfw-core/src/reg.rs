//! Stacked finite-difference regularization: the transform D = [D₁ᵀ…D_ℓᵀ]ᵀ,
//! the ℓ1 penalty ‖Dx‖₁, sign maps, and the conditional-gradient direction.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linop::LinOp;

/// A stack of directional finite-difference blocks over an `nx × ny` grid.
///
/// Block `i` pairs each base pixel `p = (ix, iy)` with its neighbor
/// `q = (ix+dx, iy+dy)` and produces the difference `x[q] − x[p]`. Pairs whose
/// neighbor falls outside the grid are omitted, so block `i` has
/// `N_i = (nx−|dx|)·(ny−|dy|)` rows, one per valid base pixel, enumerated in
/// row-major order (`iy` outer, `ix` inner). Every row therefore carries
/// exactly one `+1` and one `−1`.
#[derive(Debug, Clone)]
pub struct DiffStack {
    nx: usize,
    ny: usize,
    offsets: Vec<(i32, i32)>,
    block_lens: Vec<usize>,
    total_len: usize,
}

impl DiffStack {
    pub fn new(nx: usize, ny: usize, offsets: Vec<(i32, i32)>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("grid", "nx and ny must be positive"));
        }
        if offsets.is_empty() {
            return Err(Error::invalid("offsets", "need at least one offset"));
        }
        for (i, &(dx, dy)) in offsets.iter().enumerate() {
            if (dx, dy) == (0, 0) {
                return Err(Error::invalid("offsets", format!("offset {i} is (0,0)")));
            }
            if dx.unsigned_abs() as usize >= nx || dy.unsigned_abs() as usize >= ny {
                return Err(Error::invalid(
                    "offsets",
                    format!("offset {i} ({dx},{dy}) does not fit a {nx}x{ny} grid"),
                ));
            }
            if offsets[..i].contains(&(dx, dy)) {
                return Err(Error::invalid(
                    "offsets",
                    format!("offset {i} ({dx},{dy}) is a duplicate"),
                ));
            }
        }
        let block_lens: Vec<usize> = offsets
            .iter()
            .map(|&(dx, dy)| (nx - dx.unsigned_abs() as usize) * (ny - dy.unsigned_abs() as usize))
            .collect();
        let total_len = block_lens.iter().sum();
        Ok(Self {
            nx,
            ny,
            offsets,
            block_lens,
            total_len,
        })
    }

    /// The four standard 2D offsets {(1,0), (0,1), (1,1), (1,−1)}: one per
    /// axis direction plus both diagonals, half of the 8-neighborhood.
    pub fn standard_offsets() -> Vec<(i32, i32)> {
        vec![(1, 0), (0, 1), (1, 1), (1, -1)]
    }

    /// The stack over [`standard_offsets`](Self::standard_offsets).
    pub fn standard_2d(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, Self::standard_offsets())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn domain_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn num_blocks(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    /// Rows in block `i` (`N_i`).
    pub fn block_len(&self, block: usize) -> usize {
        self.block_lens[block]
    }

    /// Total rows across blocks (`N = Σ N_i`).
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn max_block_len(&self) -> usize {
        self.block_lens.iter().copied().max().unwrap_or(0)
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block >= self.offsets.len() {
            return Err(Error::invalid(
                "block",
                format!("index {block} out of range (have {})", self.offsets.len()),
            ));
        }
        Ok(())
    }

    /// Calls `f(row, p, q)` for every row of block `i`, in row order; the row
    /// value is `x[q] − x[p]`.
    pub(crate) fn for_each_pair(&self, block: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (dx, dy) = self.offsets[block];
        let x_lo = (-dx).max(0) as usize;
        let x_hi = self.nx - dx.max(0) as usize;
        let y_lo = (-dy).max(0) as usize;
        let y_hi = self.ny - dy.max(0) as usize;
        let mut row = 0;
        for iy in y_lo..y_hi {
            for ix in x_lo..x_hi {
                let p = iy * self.nx + ix;
                let q = (iy as i64 + dy as i64) as usize * self.nx
                    + (ix as i64 + dx as i64) as usize;
                f(row, p, q);
                row += 1;
            }
        }
    }

    /// `D_i x`.
    pub fn diff_forward(&self, block: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_block(block)?;
        if x.len() != self.domain_len() {
            return Err(Error::dim("diff_forward input", self.domain_len(), x.len()));
        }
        let mut out = vec![0.0; self.block_lens[block]];
        self.for_each_pair(block, |row, p, q| out[row] = x[q] - x[p]);
        Ok(out)
    }

    /// `D_iᵀ y`.
    pub fn diff_adjoint(&self, block: usize, y: &[f64]) -> Result<Vec<f64>> {
        self.check_block(block)?;
        if y.len() != self.block_lens[block] {
            return Err(Error::dim(
                "diff_adjoint input",
                self.block_lens[block],
                y.len(),
            ));
        }
        let mut out = vec![0.0; self.domain_len()];
        self.for_each_pair(block, |row, p, q| {
            out[q] += y[row];
            out[p] -= y[row];
        });
        Ok(out)
    }

    /// `λ · Σᵢ D_iᵀ sign(D_i x)`, the maximizer of `⟨s, Dx⟩` over the λ-∞-ball
    /// pulled back to image space.
    ///
    /// Accumulated block by block straight into the image-sized output; no
    /// transform-space vector is formed.
    pub fn fw_direction_accumulate(&self, x: &[f64], lambda: f64) -> Result<Vec<f64>> {
        if x.len() != self.domain_len() {
            return Err(Error::dim("fw_direction input", self.domain_len(), x.len()));
        }
        if !(lambda > 0.0) {
            return Err(Error::invalid("lambda", "must be positive"));
        }
        let mut out = vec![0.0; self.domain_len()];
        self.fw_direction_scaled_add(x, lambda, &mut out);
        Ok(out)
    }

    /// Adds `scale · Σᵢ D_iᵀ sign(D_i x)` onto `out` in place. Shared kernel
    /// behind `fw_direction_accumulate` and the solver z-update (which fuses
    /// `scale = α·λ` after rescaling z by `1−α`).
    pub(crate) fn fw_direction_scaled_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for block in 0..self.offsets.len() {
            self.for_each_pair(block, |_, p, q| {
                let s = sign(x[q] - x[p]);
                if s != 0.0 {
                    out[q] += scale * s;
                    out[p] -= scale * s;
                }
            });
        }
    }

    /// `‖Dx‖₁ = Σᵢ ‖D_i x‖₁`, accumulated without storing `Dx`.
    pub fn reg_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.domain_len() {
            return Err(Error::dim("reg_value input", self.domain_len(), x.len()));
        }
        let mut total = 0.0;
        for block in 0..self.offsets.len() {
            self.for_each_pair(block, |_, p, q| total += (x[q] - x[p]).abs());
        }
        Ok(total)
    }

    /// Block `i` as a standalone linear operator.
    pub fn block_op(self: &Arc<Self>, block: usize) -> Result<DiffBlockOp> {
        self.check_block(block)?;
        Ok(DiffBlockOp {
            stack: Arc::clone(self),
            block,
        })
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Entrywise sign with the exact-zero convention sign(0) = 0 (no tolerance
/// band; −0.0 counts as zero).
pub fn sign_map(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&e| sign(e)).collect()
}

/// One block of a [`DiffStack`] viewed as a [`LinOp`].
pub struct DiffBlockOp {
    stack: Arc<DiffStack>,
    block: usize,
}

impl LinOp for DiffBlockOp {
    fn domain_len(&self) -> usize {
        self.stack.domain_len()
    }

    fn range_len(&self) -> usize {
        self.stack.block_len(self.block)
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        self.stack
            .for_each_pair(self.block, |row, p, q| out[row] = x[q] - x[p]);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.stack.for_each_pair(self.block, |row, p, q| {
            out[q] += y[row];
            out[p] -= y[row];
        });
    }
}
