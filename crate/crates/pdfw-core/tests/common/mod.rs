//! Independent oracles for the acceptance suite. Everything here is built
//! from first principles (dense matrices, direct summation, closed forms)
//! rather than by calling the code paths under test, so agreement between
//! the two is evidence, not tautology.

#![allow(dead_code)]
// Oracle kernels index with the same subscripts as the formulas they encode.
#![allow(clippy::needless_range_loop)]

use pdfw_core::ct::ScanGeometry;
use pdfw_core::linop::LinOp;
use pdfw_core::reg::DiffStack;
use pdfw_core::solver::StepSizes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0, |acc: f64, (x, y)| acc.max((x - y).abs()))
}

pub fn seeded_vec(seed: u64, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Row-major dense matrix with explicit dimensions.
#[derive(Clone)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.entries[r * self.cols + c] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| dot(&self.entries[r * self.cols..(r + 1) * self.cols], x))
            .collect()
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] += self.at(r, c) * y[r];
            }
        }
        out
    }

    /// Materializes any operator column by column through its forward map.
    pub fn from_linop(op: &dyn LinOp) -> Self {
        let (m, n) = (op.range_len(), op.domain_len());
        let mut dense = Self::zeros(m, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; m];
        for c in 0..n {
            e[c] = 1.0;
            op.forward_into(&e, &mut col);
            e[c] = 0.0;
            for r in 0..m {
                dense.set(r, c, col[r]);
            }
        }
        dense
    }
}

/// Assembles the difference stack as a dense matrix straight from its
/// documented enumeration contract: per offset (dx, dy), base pixels with
/// ix in [max(0,−dx), nx−max(0,dx)) and iy likewise, walked row-major, each
/// producing the row +1 at the displaced pixel and −1 at the base pixel.
pub fn dense_diff_matrix(stack: &DiffStack) -> DenseMatrix {
    let (nx, ny) = stack.grid();
    let n = nx * ny;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &(dx, dy) in stack.offsets() {
        let x_lo = 0.max(-dx) as usize;
        let x_hi = (nx as i32 - 0.max(dx)) as usize;
        let y_lo = 0.max(-dy) as usize;
        let y_hi = (ny as i32 - 0.max(dy)) as usize;
        for iy in y_lo..y_hi {
            for ix in x_lo..x_hi {
                let p = iy * nx + ix;
                let q = (iy as i32 + dy) as usize * nx + (ix as i32 + dx) as usize;
                let mut row = vec![0.0; n];
                row[q] += 1.0;
                row[p] -= 1.0;
                rows.push(row);
            }
        }
    }
    let mut dense = DenseMatrix::zeros(rows.len(), n);
    for (r, row) in rows.iter().enumerate() {
        dense.entries[r * n..(r + 1) * n].copy_from_slice(row);
    }
    dense
}

/// Dense projector matrix built per (ray, pixel) with Liang-Barsky clipping
/// of the ray line against each pixel box. O(m·n), nothing shared with the
/// incremental grid traversal under test. Exactly valid for rays that do not
/// ride a gridline, where the two length conventions can split a segment
/// differently.
pub fn dense_projector_matrix(
    nx: usize,
    ny: usize,
    spacing: f64,
    geometry: &ScanGeometry,
) -> DenseMatrix {
    let m = geometry.m();
    let n = nx * ny;
    let mut dense = DenseMatrix::zeros(m, n);
    let num_det = geometry.num_detectors();
    for (view, &angle) in geometry.angles().iter().enumerate() {
        let (sin_a, cos_a) = angle.sin_cos();
        for det in 0..num_det {
            let r = view * num_det + det;
            let s = (det as f64 - (num_det as f64 - 1.0) / 2.0) * geometry.detector_spacing();
            // ray: point(t) = s·(cos, sin) + t·(−sin, cos), matching the
            // operator's convention of detector axis (cos, sin) and ray
            // direction perpendicular to it
            let ox = cos_a * s;
            let oy = sin_a * s;
            for iy in 0..ny {
                for ix in 0..nx {
                    let x0 = (ix as f64 - nx as f64 / 2.0) * spacing;
                    let y0 = (iy as f64 - ny as f64 / 2.0) * spacing;
                    let len =
                        clip_segment(ox, oy, -sin_a, cos_a, x0, x0 + spacing, y0, y0 + spacing);
                    if len > 0.0 {
                        dense.set(r, iy * nx + ix, len);
                    }
                }
            }
        }
    }
    dense
}

/// Length of the line {o + t·d : t ∈ ℝ} inside the box [x0,x1]×[y0,y1]
/// (Liang-Barsky clipping; d must be a unit vector so the parameter is arc
/// length).
#[allow(clippy::too_many_arguments)]
fn clip_segment(ox: f64, oy: f64, dx: f64, dy: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for (o, d, lo, hi) in [(ox, dx, x0, x1), (oy, dy, y0, y1)] {
        if d == 0.0 {
            if o < lo || o > hi {
                return 0.0;
            }
        } else {
            let (ta, tb) = ((lo - o) / d, (hi - o) / d);
            t_min = t_min.max(ta.min(tb));
            t_max = t_max.min(ta.max(tb));
        }
    }
    (t_max - t_min).max(0.0)
}

/// Largest singular value of a dense matrix via cyclic Jacobi on AᵀA.
pub fn jacobi_sigma_max(a: &DenseMatrix) -> f64 {
    let n = a.cols;
    // gram matrix G = AᵀA
    let mut g = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for r in 0..a.rows {
                acc += a.at(r, i) * a.at(r, j);
            }
            g.set(i, j, acc);
            g.set(j, i, acc);
        }
    }
    let scale = (0..n).map(|i| g.at(i, i)).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(g.at(p, q).abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let gpq = g.at(p, q);
                if gpq.abs() <= 1e-300 {
                    continue;
                }
                // 2x2 symmetric Schur rotation annihilating g[p][q]
                let tau = (g.at(q, q) - g.at(p, p)) / (2.0 * gpq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let gkp = g.at(k, p);
                    let gkq = g.at(k, q);
                    g.set(k, p, c * gkp - s * gkq);
                    g.set(k, q, s * gkp + c * gkq);
                }
                for k in 0..n {
                    let gpk = g.at(p, k);
                    let gqk = g.at(q, k);
                    g.set(p, k, c * gpk - s * gqk);
                    g.set(q, k, s * gpk + c * gqk);
                }
            }
        }
    }
    (0..n)
        .map(|i| g.at(i, i))
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}

/// Exact 1D total-variation denoising, min ½‖x−b‖² + λΣ|x_{i+1}−x_i|, by
/// the taut-string construction: the minimizer is the slope sequence of the
/// shortest path through the tube `cumsum(b) ± λ` pinned at both ends. The
/// result is certified by [`assert_tv_kkt`] before being returned, so
/// callers get a proven minimizer or a panic.
pub fn taut_string_tv(b: &[f64], lambda: f64) -> Vec<f64> {
    assert!(lambda >= 0.0);
    let n = b.len();
    assert!(n > 0);
    if n == 1 {
        return b.to_vec();
    }
    let mut x = vec![0.0; n];
    // cumulative sums r_0 = 0, r_i = b_0 + … + b_{i−1}
    let mut r = vec![0.0; n + 1];
    for i in 0..n {
        r[i + 1] = r[i] + b[i];
    }
    // Greedy walk: from the current anchor, track the tightest upper and
    // lower slope bounds a straight segment must respect; when they cross,
    // the string is forced to bend at the earlier binding tube contact.
    // Quadratic worst case, which a length-32 oracle input never notices.
    let mut anchor = 0usize;
    let mut anchor_val = r[0];
    while anchor < n {
        let mut lo_slope = f64::NEG_INFINITY;
        let mut hi_slope = f64::INFINITY;
        let mut lo_idx = anchor;
        let mut hi_idx = anchor;
        let mut bent = false;
        for j in (anchor + 1)..=n {
            let width = (j - anchor) as f64;
            // tube at interior points; the endpoints are pinned
            let (upper, lower) = if j == n {
                (r[j], r[j])
            } else {
                (r[j] + lambda, r[j] - lambda)
            };
            let up = (upper - anchor_val) / width;
            let down = (lower - anchor_val) / width;
            if up < hi_slope {
                hi_slope = up;
                hi_idx = j;
            }
            if down > lo_slope {
                lo_slope = down;
                lo_idx = j;
            }
            if lo_slope > hi_slope {
                let (slope, stop) = if hi_idx <= lo_idx {
                    (hi_slope, hi_idx)
                } else {
                    (lo_slope, lo_idx)
                };
                for k in anchor..stop {
                    x[k] = slope;
                }
                anchor_val += slope * (stop - anchor) as f64;
                anchor = stop;
                bent = true;
                break;
            }
        }
        if !bent {
            // no forced bend: the string runs straight to the pinned end
            let slope = (r[n] - anchor_val) / ((n - anchor) as f64);
            for k in anchor..n {
                x[k] = slope;
            }
            anchor = n;
        }
    }
    assert_tv_kkt(b, lambda, &x, 1e-9);
    x
}

/// Panics unless `x` satisfies the optimality conditions of
/// min ½‖x−b‖² + λΣ|x_{i+1}−x_i| to tolerance. Summing the stationarity
/// equations x_k − b_k = v_k − v_{k−1} (v the dual of the difference rows,
/// v_{−1} = v_{n−1} = 0) gives the running dual u_j = Σ_{k≤j}(x_k−b_k),
/// which must stay within [−λ, λ], equal λ·sign(x_{j+1}−x_j) at every
/// jump, and return to 0 after the last entry.
pub fn assert_tv_kkt(b: &[f64], lambda: f64, x: &[f64], tol: f64) {
    let n = b.len();
    assert_eq!(x.len(), n);
    let mut u = 0.0;
    for j in 0..n {
        u += x[j] - b[j];
        if j + 1 == n {
            assert!(u.abs() <= tol, "dual does not close: u_end = {u}");
        } else {
            assert!(
                u.abs() <= lambda + tol,
                "dual leaves the tube at {j}: |{u}| > {lambda}"
            );
            let jump = x[j + 1] - x[j];
            if jump.abs() > tol {
                let want = lambda * jump.signum();
                assert!(
                    (u - want).abs() <= tol,
                    "jump at {j} lacks a binding dual: u = {u}, want {want}"
                );
            }
        }
    }
}

/// TV objective ½‖x−b‖² + λΣ|x_{i+1}−x_i|.
pub fn tv_cost(b: &[f64], lambda: f64, x: &[f64]) -> f64 {
    let fit: f64 = x.iter().zip(b).map(|(xi, bi)| (xi - bi).powi(2)).sum();
    let tv: f64 = x.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    0.5 * fit + lambda * tv
}

/// Textbook full-dual PDCP iteration on dense matrices, storing the entire
/// transform-space dual s. The t-update is derived directly from the prox
/// optimality condition in the W⁻¹ metric:
/// t⁺ = argmin g*(t) − ⟨t, Ax̄⟩ + (1/2σ)‖t−t_k‖²_{W⁻¹}
///    = (t_k + σ·W(Ax̄ − b)) / (1+σ).
pub struct DensePdcpOracle {
    pub a: DenseMatrix,
    pub d: DenseMatrix,
    pub b: Vec<f64>,
    pub w: Vec<f64>,
    pub lambda: f64,
    pub x: Vec<f64>,
    pub x_bar: Vec<f64>,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
}

impl DensePdcpOracle {
    pub fn new(a: DenseMatrix, d: DenseMatrix, b: Vec<f64>, w: Vec<f64>, lambda: f64, x0: &[f64]) -> Self {
        let (m, n, big_n) = (a.rows, a.cols, d.rows);
        assert_eq!(b.len(), m);
        assert_eq!(w.len(), m);
        assert_eq!(d.cols, n);
        assert_eq!(x0.len(), n);
        Self {
            a,
            d,
            b,
            w,
            lambda,
            x: x0.to_vec(),
            x_bar: x0.to_vec(),
            t: vec![0.0; m],
            s: vec![0.0; big_n],
        }
    }

    pub fn step(&mut self, steps: StepSizes) {
        let ax_bar = self.a.matvec(&self.x_bar);
        for i in 0..self.t.len() {
            self.t[i] = (self.t[i] + steps.sigma * self.w[i] * (ax_bar[i] - self.b[i]))
                / (1.0 + steps.sigma);
        }
        let dx_bar = self.d.matvec(&self.x_bar);
        for i in 0..self.s.len() {
            self.s[i] =
                (self.s[i] + steps.sigma * dx_bar[i]).clamp(-self.lambda, self.lambda);
        }
        let z = self.d.matvec_t(&self.s);
        let at_t = self.a.matvec_t(&self.t);
        let x_old = self.x.clone();
        for i in 0..self.x.len() {
            self.x[i] -= steps.tau * (at_t[i] + z[i]);
        }
        for i in 0..self.x.len() {
            self.x_bar[i] = self.x[i] + steps.theta * (self.x[i] - x_old[i]);
        }
    }
}

/// Direct O(K²) evaluation of the two schedule double sums at horizon K:
/// Σ_{j=1..K} τ_{j−1}·Π_{i=j..K}(1−α_i) and the same with 1/(1+σ_i) factors.
/// Each term's product is accumulated separately, sharing nothing with the
/// forward recurrences under test.
pub fn direct_double_sums(
    tau: &[f64],
    alpha: &[f64],
    sigma: &[f64],
    horizon: usize,
) -> (f64, f64) {
    assert!(tau.len() > horizon && alpha.len() > horizon && sigma.len() > horizon);
    let mut alpha_sum = 0.0;
    let mut sigma_sum = 0.0;
    for j in 1..=horizon {
        let mut alpha_prod = tau[j - 1];
        let mut sigma_prod = tau[j - 1];
        for i in j..=horizon {
            alpha_prod *= 1.0 - alpha[i];
            sigma_prod /= 1.0 + sigma[i];
        }
        alpha_sum += alpha_prod;
        sigma_sum += sigma_prod;
    }
    (alpha_sum, sigma_sum)
}
