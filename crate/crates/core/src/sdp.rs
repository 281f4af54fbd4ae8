//! Semidefinite feasibility: `find y` with `Gc(y) = Cc + Σₚ yₚ Aₚc ⪰ 0` for every cone.
//!
//! The solver runs a phase-I primal-dual interior-point method on
//!
//! ```text
//!   minimize t   subject to   Gc(y) + t·I ⪰ 0,   |yₚ| ≤ R
//! ```
//!
//! with HKM search directions and Mehrotra predictor-corrector steps. It stops
//! as soon as `t < −tol` (strict interior found) or when the primal iterate
//! certifies `t* > tol`. Every `Feasible` verdict is re-checked with an
//! independent eigenvalue computation on the caller's (unscaled) cones.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve, min_eigenvalue, sqrt, Mat};

/// Position of `(i, j)`, `i ≤ j`, in the row-major upper-triangle vectorization.
pub fn svec_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - i * i.saturating_sub(1) / 2 - i + j
}

/// Symmetric vectorization with `√2`-scaled off-diagonals, so that
/// `⟨svec(S₁), svec(S₂)⟩ = tr(S₁S₂)`.
pub fn svec(m: &Mat) -> Vec<f64> {
    let n = m.nrows();
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let x = 0.5 * (m[(i, j)] + m[(j, i)]);
            v.push(if i == j { x } else { x * core::f64::consts::SQRT_2 });
        }
    }
    v
}

/// Inverse of [`svec`].
pub fn smat(n: usize, v: &[f64]) -> Mat {
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let x = v[svec_index(n, i, j)];
            if i == j {
                m[(i, i)] = x;
            } else {
                let x = x / core::f64::consts::SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
    }
    m
}

/// One cone `C + Σ yₚ Aₚ ⪰ 0` in `svec` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpCone {
    pub dim: usize,
    pub constant: Vec<f64>,
    /// `(variable, svec index, value)`.
    pub coeffs: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub n_vars: usize,
    pub cones: Vec<SdpCone>,
}

impl SdpProblem {
    pub fn validate(&self) -> Result<()> {
        if self.cones.is_empty() {
            return Err(invalid("problem has no cones"));
        }
        for (c, cone) in self.cones.iter().enumerate() {
            let len = cone.dim * (cone.dim + 1) / 2;
            if cone.dim == 0 || cone.constant.len() != len {
                return Err(invalid(format!("cone {c}: constant has the wrong length")));
            }
            if cone.constant.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("cone {c}: non-finite constant")));
            }
            for &(v, k, x) in &cone.coeffs {
                if v >= self.n_vars || k >= len || !x.is_finite() {
                    return Err(invalid(format!("cone {c}: bad coefficient ({v}, {k}, {x})")));
                }
            }
        }
        Ok(())
    }

    pub fn evaluate_cone(&self, c: usize, y: &[f64]) -> Mat {
        let cone = &self.cones[c];
        let mut v = cone.constant.clone();
        for &(p, k, x) in &cone.coeffs {
            v[k] += x * y[p];
        }
        smat(cone.dim, &v)
    }

    /// Minimum eigenvalue of every cone at `y`.
    pub fn cone_min_eigenvalues(&self, y: &[f64]) -> Result<Vec<f64>> {
        (0..self.cones.len()).map(|c| min_eigenvalue(&self.evaluate_cone(c, y))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Feasible,
    Infeasible,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Phase-I threshold on the (scaled) shift `t`.
    pub tol: f64,
    /// Allowed negative eigenvalue in the independent re-check.
    pub recheck_slack: f64,
    /// Box on the scaled variables.
    pub box_radius: f64,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-8, recheck_slack: 1e-7, box_radius: 1e7, step_fraction: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub y: Vec<f64>,
    /// Re-checked minimum eigenvalue per cone at `y`.
    pub cone_min_eigs: Vec<f64>,
    pub iterations: usize,
    /// Phase-I shift at exit (scaled units; negative means strictly feasible).
    pub t: f64,
    /// Certified lower bound on the optimal shift (scaled units).
    pub t_lower: f64,
    /// Filled in by callers that can read a clock.
    pub wall_seconds: Option<f64>,
    pub message: String,
    pub history: Vec<IterationLog>,
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub t: f64,
    pub t_lower: f64,
    pub mu: f64,
    pub primal_residual: f64,
    pub step_primal: f64,
    pub step_dual: f64,
}

impl SdpSolution {
    /// Smallest re-checked cone eigenvalue (positive is strict feasibility).
    pub fn margin(&self) -> f64 {
        self.cone_min_eigs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Cone data after scaling, with per-variable sparse coefficients.
struct Cone {
    n: usize,
    c: Vec<f64>,
    /// Global (scaled) variable index per local variable; the shift `t` is last.
    vars: Vec<usize>,
    start: Vec<usize>,
    /// Upper-triangle entries `(a, b, value)` of each coefficient matrix.
    ents: Vec<(u32, u32, f64)>,
    /// Inner-product weights against symmetrized matrices: `(a·n+b, w)`.
    dot_idx: Vec<u32>,
    dot_w: Vec<f64>,
}

impl Cone {
    fn entries(&self, k: usize) -> &[(u32, u32, f64)] {
        &self.ents[self.start[k]..self.start[k + 1]]
    }

    /// `Σ yₚ Aₚ + t I` for a full (scaled) step vector whose last entry is t.
    fn apply(&self, dy: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let n = self.n;
        for (k, &g) in self.vars.iter().enumerate() {
            let d = dy[g];
            if d == 0.0 {
                continue;
            }
            for &(a, b, v) in self.entries(k) {
                let (a, b) = (a as usize, b as usize);
                out[a * n + b] += v * d;
                if a != b {
                    out[b * n + a] += v * d;
                }
            }
        }
    }

    /// `⟨Aₚ, W⟩` for every local variable, added into `out` (global indices).
    fn adjoint(&self, w: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.n;
        for (k, &g) in self.vars.iter().enumerate() {
            let mut s = 0.0;
            for &(a, b, v) in self.entries(k) {
                let (a, b) = (a as usize, b as usize);
                s += if a == b { v * w[a * n + a] } else { v * (w[a * n + b] + w[b * n + a]) };
            }
            out[g] += scale * s;
        }
    }
}

fn to_mat(n: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

fn from_mat(m: &DMatrix<f64>) -> Vec<f64> {
    // symmetric inputs: column-major storage equals row-major
    m.transpose().as_slice().to_vec()
}

fn matmul(n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let oi = &mut out[i * n..(i + 1) * n];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let bk = &b[k * n..(k + 1) * n];
            for (o, &x) in oi.iter_mut().zip(bk) {
                *o += aik * x;
            }
        }
    }
}

fn symmetrize(n: usize, m: &mut [f64]) {
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest `α ≤ cap` with `X + αΔX ⪰ 0` (X positive definite).
fn max_step(n: usize, x: &[f64], dx: &[f64], cap: f64) -> Option<f64> {
    let xm = to_mat(n, x);
    let chol = nalgebra::Cholesky::new(xm.clone());
    let lam = match chol {
        Some(ch) => {
            let l = ch.l();
            let li = l.clone().try_inverse()?;
            let m = &li * to_mat(n, dx) * li.transpose();
            min_eigenvalue(&m).ok()?
        }
        None => {
            // fall back to X^{-1/2} from an eigendecomposition
            let eig = xm.symmetric_eigen();
            if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
                return None;
            }
            let d = eig.eigenvalues.map(|v| 1.0 / sqrt(v));
            let q = &eig.eigenvectors;
            let w = q * DMatrix::from_diagonal(&d) * q.transpose();
            min_eigenvalue(&(&w * to_mat(n, dx) * &w)).ok()?
        }
    };
    Some(if lam >= 0.0 { cap } else { cap.min(-1.0 / lam) })
}

fn inverse_spd(n: usize, s: &[f64]) -> Option<Vec<f64>> {
    let ch = nalgebra::Cholesky::new(to_mat(n, s))?;
    let inv = ch.inverse();
    let mut v = from_mat(&inv);
    symmetrize(n, &mut v);
    Some(v)
}

struct Scaled {
    cones: Vec<Cone>,
    /// y = var_scale ∘ ŷ
    var_scale: Vec<f64>,
    m: usize,
}

fn prepare(problem: &SdpProblem) -> Scaled {
    let m = problem.n_vars;
    let mut cone_scale = Vec::with_capacity(problem.cones.len());
    for cone in &problem.cones {
        let cmax = cone.constant.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let s = if cmax > 0.0 {
            1.0 / cmax
        } else {
            let amax = cone.coeffs.iter().fold(0.0f64, |a, t| a.max(t.2.abs()));
            if amax > 0.0 { 1.0 / amax } else { 1.0 }
        };
        cone_scale.push(s);
    }
    let mut vmax = vec![0.0f64; m];
    for (cone, &s) in problem.cones.iter().zip(&cone_scale) {
        for &(p, _, x) in &cone.coeffs {
            vmax[p] = vmax[p].max((x * s).abs());
        }
    }
    let var_scale: Vec<f64> = vmax.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 1.0 }).collect();

    let mut cones = Vec::with_capacity(problem.cones.len());
    for (cone, &s) in problem.cones.iter().zip(&cone_scale) {
        let n = cone.dim;
        // svec index → (i, j)
        let mut pos = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                pos.push((i, j));
            }
        }
        let c = {
            let cm = smat(n, &cone.constant);
            let mut v = from_mat(&cm);
            v.iter_mut().for_each(|x| *x *= s);
            v
        };
        let mut vars = Vec::new();
        let mut start = vec![0];
        let mut ents: Vec<(u32, u32, f64)> = Vec::new();
        let mut sorted = cone.coeffs.clone();
        sorted.sort_unstable_by_key(|&(p, k, _)| (p, k));
        for &(p, k, x) in &sorted {
            if vars.last() != Some(&p) {
                if !vars.is_empty() {
                    start.push(ents.len());
                }
                vars.push(p);
            }
            let (i, j) = pos[k];
            let v = if i == j { x } else { x / core::f64::consts::SQRT_2 };
            ents.push((i as u32, j as u32, v * s * var_scale[p]));
        }
        if !vars.is_empty() {
            start.push(ents.len());
        }
        // the shift t: identity
        vars.push(m);
        for a in 0..n {
            ents.push((a as u32, a as u32, 1.0));
        }
        start.push(ents.len());
        let mut dot_idx = Vec::with_capacity(ents.len());
        let mut dot_w = Vec::with_capacity(ents.len());
        for &(a, b, v) in &ents {
            dot_idx.push(a * n as u32 + b);
            dot_w.push(if a == b { 0.5 * v } else { v });
        }
        cones.push(Cone { n, c, vars, start, ents, dot_idx, dot_w });
    }
    Scaled { cones, var_scale, m }
}

struct Iterate {
    yt: Vec<f64>,
    s: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    xu: Vec<f64>,
    xl: Vec<f64>,
}

fn slacks(p: &Scaled, yt: &[f64], out: &mut [Vec<f64>]) {
    let mut tmp = Vec::new();
    for (cone, s) in p.cones.iter().zip(out.iter_mut()) {
        tmp.resize(cone.n * cone.n, 0.0);
        cone.apply(yt, &mut tmp);
        for ((o, &c), &a) in s.iter_mut().zip(&cone.c).zip(&tmp) {
            *o = c + a;
        }
    }
}

/// Schur complement `Mᵢⱼ = Σc tr(Aᵢ X Aⱼ S⁻¹)` (upper triangle, row-major).
fn assemble_schur(p: &Scaled, x: &[Vec<f64>], z: &[Vec<f64>], mm: &mut [f64]) {
    let dim = p.m + 1;
    let mut w = Vec::new();
    let mut g = Vec::new();
    let mut touched = Vec::new();
    let mut mark = Vec::new();
    for (ci, cone) in p.cones.iter().enumerate() {
        let n = cone.n;
        let (xc, zc) = (&x[ci], &z[ci]);
        w.resize(n * n, 0.0);
        g.resize(n * n, 0.0);
        mark.resize(n, false);
        for (k, &gk) in cone.vars.iter().enumerate() {
            // W = Aₖ Z on the touched rows only, then G = X W, symmetrized
            touched.clear();
            for &(a, b, v) in cone.entries(k) {
                let (a, b) = (a as usize, b as usize);
                for &(r, o) in &[(a, b), (b, a)] {
                    if !mark[r] {
                        mark[r] = true;
                        touched.push(r);
                        w[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    let zr = &zc[o * n..(o + 1) * n];
                    for (wv, &zv) in w[r * n..(r + 1) * n].iter_mut().zip(zr) {
                        *wv += v * zv;
                    }
                    if a == b {
                        break;
                    }
                }
            }
            g.iter_mut().for_each(|v| *v = 0.0);
            for &r in &touched {
                mark[r] = false;
                let wr = &w[r * n..(r + 1) * n];
                for i in 0..n {
                    let xir = xc[i * n + r];
                    if xir == 0.0 {
                        continue;
                    }
                    for (gv, &wv) in g[i * n..(i + 1) * n].iter_mut().zip(wr) {
                        *gv += xir * wv;
                    }
                }
            }
            for i in 0..n {
                for j in i..n {
                    let v = g[i * n + j] + g[j * n + i];
                    g[i * n + j] = v;
                }
            }
            let row = &mut mm[gk * dim..(gk + 1) * dim];
            for (q, &gq) in cone.vars.iter().enumerate().skip(k) {
                let (s0, s1) = (cone.start[q], cone.start[q + 1]);
                let mut acc = 0.0;
                for (&idx, &wt) in cone.dot_idx[s0..s1].iter().zip(&cone.dot_w[s0..s1]) {
                    acc += wt * g[idx as usize];
                }
                row[gq] += acc;
            }
        }
    }
}

struct Direction {
    dyt: Vec<f64>,
    ds: Vec<Vec<f64>>,
    dx: Vec<Vec<f64>>,
    dsu: Vec<f64>,
    dsl: Vec<f64>,
    dxu: Vec<f64>,
    dxl: Vec<f64>,
}

/// Factored, equilibrated Schur system.
struct Factor {
    l: Vec<f64>,
    d: Vec<f64>,
    dim: usize,
}

impl Factor {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = rhs.iter().zip(&self.d).map(|(r, d)| r * d).collect();
        cholesky_solve(&self.l, self.dim, &mut v);
        v.iter_mut().zip(&self.d).for_each(|(x, d)| *x *= d);
        v
    }
}

fn factor_schur(upper: &[f64], dim: usize) -> Option<Factor> {
    let d: Vec<f64> = (0..dim)
        .map(|i| {
            let v = upper[i * dim + i];
            if v > 0.0 { 1.0 / sqrt(v) } else { 1.0 }
        })
        .collect();
    let mut reg = 1e-12;
    for _ in 0..6 {
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                l[j * dim + i] = upper[i * dim + j] * d[i] * d[j];
            }
            l[i * dim + i] += reg;
        }
        if cholesky_in_place(&mut l, dim).is_ok() {
            return Some(Factor { l, d, dim });
        }
        reg *= 100.0;
    }
    None
}

/// Solves the feasibility problem; see the module documentation.
pub fn solve_feasibility(problem: &SdpProblem, opts: &SolverOptions) -> Result<SdpSolution> {
    problem.validate()?;
    let p = prepare(problem);
    let m = p.m;
    let dim = m + 1;
    let r_box = opts.box_radius;
    let nu = p.cones.iter().map(|c| c.n).sum::<usize>() as f64 + 2.0 * m as f64;
    let ntot: usize = p.cones.iter().map(|c| c.n).sum();

    // start: y = 0, t above every constant's most negative eigenvalue
    let mut t0 = 0.0f64;
    for cone in &p.cones {
        let lam = min_eigenvalue(&to_mat(cone.n, &cone.c))?;
        t0 = t0.max(-lam);
    }
    t0 += 1.0;
    let mut it = Iterate {
        yt: {
            let mut v = vec![0.0; dim];
            v[m] = t0;
            v
        },
        s: p.cones.iter().map(|c| vec![0.0; c.n * c.n]).collect(),
        x: p
            .cones
            .iter()
            .map(|c| {
                let mut v = vec![0.0; c.n * c.n];
                for a in 0..c.n {
                    v[a * c.n + a] = 1.0 / ntot as f64;
                }
                v
            })
            .collect(),
        xu: vec![0.0; m],
        xl: vec![0.0; m],
    };
    slacks(&p, &it.yt, &mut it.s);
    let mu0: f64 = it.x.iter().zip(&it.s).map(|(x, s)| dot(x, s)).sum::<f64>() / ntot as f64;
    it.xu.iter_mut().for_each(|v| *v = mu0 / r_box);
    it.xl.iter_mut().for_each(|v| *v = mu0 / r_box);

    let mut b = vec![0.0; dim];
    b[m] = -1.0;
    let mut mm = vec![0.0; dim * dim];
    let mut t_lower = f64::NEG_INFINITY;
    let mut stalls = 0;
    let mut message = String::new();
    let mut status = SdpStatus::Inconclusive;
    let mut iterations = 0;
    let mut best: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut history: Vec<IterationLog> = Vec::new();

    for iter in 0..opts.max_iter {
        iterations = iter;
        let t = it.yt[m];
        let y_unscaled: Vec<f64> = it.yt[..m].iter().zip(&p.var_scale).map(|(v, s)| v * s).collect();

        if t < -opts.tol {
            let eigs = problem.cone_min_eigenvalues(&y_unscaled)?;
            let worst = eigs.iter().copied().fold(f64::INFINITY, f64::min);
            if worst >= -opts.recheck_slack {
                status = SdpStatus::Feasible;
                best = Some((y_unscaled, eigs));
                message = format!("strictly feasible point found (t = {t:.3e})");
                break;
            }
            message = format!("phase-I point failed the eigenvalue re-check ({worst:.3e})");
        }

        // certified lower bound on t*: 0 ≤ ⟨X, S⟩ + box terms for every feasible (y, t)
        let mut ax = vec![0.0; dim];
        let mut cx = 0.0;
        let mut tau = 0.0;
        for (ci, cone) in p.cones.iter().enumerate() {
            cone.adjoint(&it.x[ci], 1.0, &mut ax);
            cx += dot(&cone.c, &it.x[ci]);
            tau += (0..cone.n).map(|a| it.x[ci][a * cone.n + a]).sum::<f64>();
        }
        let viol: f64 = ax[..m].iter().map(|v| v.abs()).sum();
        let lb = -(cx + r_box * viol) / tau;
        t_lower = t_lower.max(lb);
        if t_lower > opts.tol {
            status = SdpStatus::Infeasible;
            message = format!("phase-I lower bound t* ≥ {t_lower:.3e}");
            break;
        }

        // complementarity
        let xs: f64 = it.x.iter().zip(&it.s).map(|(x, s)| dot(x, s)).sum();
        let su: Vec<f64> = it.yt[..m].iter().map(|y| r_box - y).collect();
        let sl: Vec<f64> = it.yt[..m].iter().map(|y| r_box + y).collect();
        let xsb: f64 = it.xu.iter().zip(&su).map(|(a, b)| a * b).sum::<f64>()
            + it.xl.iter().zip(&sl).map(|(a, b)| a * b).sum::<f64>();
        let mu = (xs + xsb) / nu;
        // converged without a certificate either way
        let rp_t = (tau - 1.0).abs();
        let rp_y = ax[..m].iter().zip(it.xu.iter().zip(&it.xl)).map(|(a, (u, l))| (a - u + l).abs()).fold(0.0, f64::max);
        if mu * nu < 1e-12 * (1.0 + t.abs()) && rp_t < 1e-9 && rp_y < 1e-9 {
            if t - mu * nu > opts.tol {
                status = SdpStatus::Infeasible;
                message = format!("phase-I converged at t* ≈ {t:.3e} (certified bound {t_lower:.3e})");
            } else {
                message = format!("phase-I converged at the boundary, t* ≈ {t:.3e}");
            }
            break;
        }

        // objective has settled above the threshold but no certificate forms
        if t > opts.tol && mu * nu < 1e-5 * (1.0 + t.abs()) && history.len() >= 3 {
            let back = history[history.len() - 3].t;
            if (back - t).abs() <= 1e-6 * (1.0 + t.abs()) {
                message = format!("phase-I stalled at t ≈ {t:.3e} without an infeasibility certificate");
                break;
            }
        }

        let z: Vec<Vec<f64>> = match p.cones.iter().zip(&it.s).map(|(c, s)| inverse_spd(c.n, s)).collect() {
            Some(z) => z,
            None => {
                message = String::from("slack matrix lost definiteness");
                break;
            }
        };

        mm.iter_mut().for_each(|v| *v = 0.0);
        assemble_schur(&p, &it.x, &z, &mut mm);
        for k in 0..m {
            mm[k * dim + k] += it.xu[k] / su[k] + it.xl[k] / sl[k];
        }
        let fac = match factor_schur(&mm, dim) {
            Some(f) => f,
            None => {
                message = String::from("Schur complement factorization failed");
                break;
            }
        };

        // predictor (σ = 0) then corrector
        let pred = direction(&p, &it, &z, &su, &sl, &fac, &b, 0.0, None);
        let ap = step_primal(&p, &it, &pred, 1.0);
        let ad = step_dual(&p, &it, &pred, &su, &sl, 1.0);
        let (ap, ad) = match (ap, ad) {
            (Some(a), Some(d)) => (a, d),
            _ => {
                message = String::from("step length computation failed");
                break;
            }
        };
        let mut xs_aff = 0.0;
        for (ci, cone) in p.cones.iter().enumerate() {
            let nn = cone.n * cone.n;
            for k in 0..nn {
                xs_aff += (it.x[ci][k] + ap * pred.dx[ci][k]) * (it.s[ci][k] + ad * pred.ds[ci][k]);
            }
        }
        for k in 0..m {
            xs_aff += (it.xu[k] + ap * pred.dxu[k]) * (su[k] + ad * pred.dsu[k]);
            xs_aff += (it.xl[k] + ap * pred.dxl[k]) * (sl[k] + ad * pred.dsl[k]);
        }
        let sigma = { let q = ((xs_aff / nu) / mu).clamp(0.0, 1.0); q * q * q };
        let corr = direction(&p, &it, &z, &su, &sl, &fac, &b, sigma * mu, Some(&pred));

        let ap = step_primal(&p, &it, &corr, 1.0).map(|a| (opts.step_fraction * a).min(1.0));
        let ad = step_dual(&p, &it, &corr, &su, &sl, 1.0).map(|a| (opts.step_fraction * a).min(1.0));
        let (ap, ad) = match (ap, ad) {
            (Some(a), Some(d)) => (a, d),
            _ => {
                message = String::from("step length computation failed");
                break;
            }
        };
        for (ci, x) in it.x.iter_mut().enumerate() {
            for (v, d) in x.iter_mut().zip(&corr.dx[ci]) {
                *v += ap * d;
            }
        }
        for k in 0..m {
            it.xu[k] += ap * corr.dxu[k];
            it.xl[k] += ap * corr.dxl[k];
        }
        for (v, d) in it.yt.iter_mut().zip(&corr.dyt) {
            *v += ad * d;
        }
        slacks(&p, &it.yt, &mut it.s);
        history.push(IterationLog { t, t_lower, mu, primal_residual: rp_y, step_primal: ap, step_dual: ad });

        if ap < 1e-8 && ad < 1e-8 {
            stalls += 1;
            if stalls >= 3 {
                message = String::from("interior-point steps stalled");
                break;
            }
        } else {
            stalls = 0;
        }
        iterations = iter + 1;
        if iterations == opts.max_iter {
            message = format!("iteration cap {} reached (t = {:.3e})", opts.max_iter, it.yt[m]);
        }
    }

    let t = it.yt[m];
    let (y, cone_min_eigs) = match best {
        Some(v) => v,
        None => {
            let y: Vec<f64> = it.yt[..m].iter().zip(&p.var_scale).map(|(v, s)| v * s).collect();
            let eigs = problem.cone_min_eigenvalues(&y)?;
            (y, eigs)
        }
    };
    Ok(SdpSolution { status, y, cone_min_eigs, iterations, t, t_lower, wall_seconds: None, message, history })
}

#[allow(clippy::too_many_arguments)]
fn direction(
    p: &Scaled,
    it: &Iterate,
    z: &[Vec<f64>],
    su: &[f64],
    sl: &[f64],
    fac: &Factor,
    b: &[f64],
    sigma_mu: f64,
    pred: Option<&Direction>,
) -> Direction {
    let m = p.m;
    let dim = m + 1;
    // rhs = b − σμ⟨Ā, S⁻¹⟩ + ⟨Ā, W⟩ with Ā = −A, W the second-order term
    let mut rhs = b.to_vec();
    let mut wmats: Vec<Vec<f64>> = Vec::new();
    for (ci, cone) in p.cones.iter().enumerate() {
        let n = cone.n;
        let mut target = z[ci].iter().map(|v| sigma_mu * v).collect::<Vec<f64>>();
        if let Some(pr) = pred {
            // W = sym(ΔXa ΔSa S⁻¹)
            let mut t1 = vec![0.0; n * n];
            let mut w = vec![0.0; n * n];
            matmul(n, &pr.dx[ci], &pr.ds[ci], &mut t1);
            matmul(n, &t1, &z[ci], &mut w);
            symmetrize(n, &mut w);
            for (tv, wv) in target.iter_mut().zip(&w) {
                *tv -= wv;
            }
            wmats.push(w);
        }
        // ⟨Ā, target⟩ = −⟨A, target⟩ and rhs gets −⟨Ā, target⟩
        cone.adjoint(&target, 1.0, &mut rhs);
    }
    for k in 0..m {
        let mut tu = sigma_mu / su[k];
        let mut tl = sigma_mu / sl[k];
        if let Some(pr) = pred {
            tu -= pr.dxu[k] * pr.dsu[k] / su[k];
            tl -= pr.dxl[k] * pr.dsl[k] / sl[k];
        }
        // Ā for the upper box is +eₖ, for the lower box −eₖ
        rhs[k] -= tu;
        rhs[k] += tl;
    }
    let dyt = fac.solve(&rhs);
    debug_assert_eq!(dyt.len(), dim);

    let mut ds = Vec::with_capacity(p.cones.len());
    let mut dx = Vec::with_capacity(p.cones.len());
    for (ci, cone) in p.cones.iter().enumerate() {
        let n = cone.n;
        let mut dsc = vec![0.0; n * n];
        cone.apply(&dyt, &mut dsc);
        // ΔX = σμZ − X − sym(X ΔS Z) − W
        let mut t1 = vec![0.0; n * n];
        let mut t2 = vec![0.0; n * n];
        matmul(n, &it.x[ci], &dsc, &mut t1);
        matmul(n, &t1, &z[ci], &mut t2);
        symmetrize(n, &mut t2);
        let mut dxc = vec![0.0; n * n];
        for k in 0..n * n {
            dxc[k] = sigma_mu * z[ci][k] - it.x[ci][k] - t2[k];
            if pred.is_some() {
                dxc[k] -= wmats[ci][k];
            }
        }
        symmetrize(n, &mut dxc);
        ds.push(dsc);
        dx.push(dxc);
    }
    let mut dsu = vec![0.0; m];
    let mut dsl = vec![0.0; m];
    let mut dxu = vec![0.0; m];
    let mut dxl = vec![0.0; m];
    for k in 0..m {
        dsu[k] = -dyt[k];
        dsl[k] = dyt[k];
        dxu[k] = sigma_mu / su[k] - it.xu[k] - it.xu[k] * dsu[k] / su[k];
        dxl[k] = sigma_mu / sl[k] - it.xl[k] - it.xl[k] * dsl[k] / sl[k];
        if let Some(pr) = pred {
            dxu[k] -= pr.dxu[k] * pr.dsu[k] / su[k];
            dxl[k] -= pr.dxl[k] * pr.dsl[k] / sl[k];
        }
    }
    Direction { dyt, ds, dx, dsu, dsl, dxu, dxl }
}

fn scalar_step(x: f64, dx: f64, cap: f64) -> f64 {
    if dx < 0.0 { cap.min(-x / dx) } else { cap }
}

fn step_primal(p: &Scaled, it: &Iterate, d: &Direction, cap: f64) -> Option<f64> {
    let mut a = cap;
    for (ci, cone) in p.cones.iter().enumerate() {
        a = max_step(cone.n, &it.x[ci], &d.dx[ci], a)?;
    }
    for k in 0..p.m {
        a = scalar_step(it.xu[k], d.dxu[k], a);
        a = scalar_step(it.xl[k], d.dxl[k], a);
    }
    Some(a)
}

fn step_dual(p: &Scaled, it: &Iterate, d: &Direction, su: &[f64], sl: &[f64], cap: f64) -> Option<f64> {
    let mut a = cap;
    for (ci, cone) in p.cones.iter().enumerate() {
        a = max_step(cone.n, &it.s[ci], &d.ds[ci], a)?;
    }
    for k in 0..p.m {
        a = scalar_step(su[k], d.dsu[k], a);
        a = scalar_step(sl[k], d.dsl[k], a);
    }
    Some(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_cone(c: f64, a: f64) -> SdpCone {
        SdpCone { dim: 1, constant: vec![c], coeffs: vec![(0, 0, a)] }
    }

    #[test]
    fn svec_inner_product() {
        let mut g = ChaCha8Rng::seed_from_u64(1);
        for n in 1..6 {
            let mut r = || {
                let m = Mat::from_fn(n, n, |_, _| g.random::<f64>() - 0.5);
                &m + m.transpose()
            };
            let (a, b) = (r(), r());
            let tr = (&a * &b).trace();
            assert!((dot(&svec(&a), &svec(&b)) - tr).abs() < 1e-12);
            assert!((smat(n, &svec(&a)) - &a).abs().max() < 1e-15);
        }
    }

    #[test]
    fn scalar_feasible() {
        // x·I₂ − I ⪰ 0
        let cone = SdpCone { dim: 2, constant: svec(&(-Mat::identity(2, 2))), coeffs: vec![(0, 0, 1.0), (0, 2, 1.0)] };
        let prob = SdpProblem { n_vars: 1, cones: vec![cone] };
        let sol = solve_feasibility(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible, "{}", sol.message);
        assert!(sol.y[0] >= 1.0 - 1e-7);
    }

    #[test]
    fn contradictory_scalars_infeasible() {
        let prob = SdpProblem { n_vars: 1, cones: vec![scalar_cone(-1.0, 1.0), scalar_cone(-1.0, -1.0)] };
        let sol = solve_feasibility(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible, "{}", sol.message);
        assert!(sol.t_lower > 1e-8);
    }

    #[test]
    fn boundary_is_not_feasible() {
        // x ≥ 0 and −x ≥ 0: only the boundary point x = 0
        let prob = SdpProblem { n_vars: 1, cones: vec![scalar_cone(0.0, 1.0), scalar_cone(0.0, -1.0)] };
        let sol = solve_feasibility(&prob, &SolverOptions::default()).unwrap();
        assert_ne!(sol.status, SdpStatus::Feasible);
    }

    #[test]
    fn small_lmi_feasible() {
        // [[x, 1], [1, y]] ≻ 0 with x ≤ 2 and y ≤ 2
        let c = svec(&Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let lmi = SdpCone { dim: 2, constant: c, coeffs: vec![(0, 0, 1.0), (1, 2, 1.0)] };
        let prob = SdpProblem {
            n_vars: 2,
            cones: vec![
                lmi,
                SdpCone { dim: 1, constant: vec![2.0], coeffs: vec![(0, 0, -1.0)] },
                SdpCone { dim: 1, constant: vec![2.0], coeffs: vec![(1, 0, -1.0)] },
            ],
        };
        let sol = solve_feasibility(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        assert!(sol.y[0] * sol.y[1] > 1.0);
    }

    #[test]
    fn small_lmi_infeasible() {
        // [[x, 1], [1, y]] ⪰ 0 with x ≤ 0.5 and y ≤ 0.5
        let c = svec(&Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let lmi = SdpCone { dim: 2, constant: c, coeffs: vec![(0, 0, 1.0), (1, 2, 1.0)] };
        let prob = SdpProblem {
            n_vars: 2,
            cones: vec![
                lmi,
                SdpCone { dim: 1, constant: vec![0.5], coeffs: vec![(0, 0, -1.0)] },
                SdpCone { dim: 1, constant: vec![0.5], coeffs: vec![(1, 0, -1.0)] },
            ],
        };
        let sol = solve_feasibility(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible, "{}", sol.message);
    }

    #[test]
    fn rejects_malformed() {
        let prob = SdpProblem { n_vars: 1, cones: vec![SdpCone { dim: 1, constant: vec![0.0], coeffs: vec![(3, 0, 1.0)] }] };
        assert!(solve_feasibility(&prob, &SolverOptions::default()).is_err());
        let prob = SdpProblem { n_vars: 1, cones: vec![] };
        assert!(solve_feasibility(&prob, &SolverOptions::default()).is_err());
    }
}
