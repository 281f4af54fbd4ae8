//! Closed-loop simulation with the adaptation law.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::linalg::Mat;
use crate::model::{PolytopicSystem, SimplexPoint};
use crate::synthesis::ControllerRealization;

/// States with a norm beyond this count as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub enum AlphaProfile {
    Constant(SimplexPoint),
    /// `(t_start, α)` pairs sorted by time; the first entry applies before its start too.
    Piecewise(Vec<(f64, SimplexPoint)>),
}

impl AlphaProfile {
    pub fn at(&self, t: f64) -> &SimplexPoint {
        match self {
            AlphaProfile::Constant(a) => a,
            AlphaProfile::Piecewise(s) => {
                let mut cur = &s[0].1;
                for (t0, a) in s {
                    if t >= *t0 {
                        cur = a;
                    }
                }
                cur
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            AlphaProfile::Constant(a) => a.len(),
            AlphaProfile::Piecewise(s) => s.first().map_or(0, |p| p.1.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub x0: Vec<f64>,
    pub alpha: AlphaProfile,
    pub alpha_hat0: Vec<f64>,
    pub gamma: f64,
    pub t_end: f64,
    pub dt: f64,
    pub clamp_simplex: bool,
    /// Keep every n-th step in the trace (the last step is always kept);
    /// the step diagnostics still see every step.
    pub record_every: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationTrace {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub alpha_hat: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub diverged: bool,
    /// Samples where some α̂ⱼ < 0 (the unclamped law only preserves the sum).
    pub simplex_violations: usize,
    /// Over every integration step, recorded or not.
    pub steps: StepDiagnostics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    pub count: usize,
    pub max_sum_deviation: f64,
    /// Steps where `V` grew by more than `1e-8·V` with α̂ ∈ Ω_r at both ends.
    pub v_increases: usize,
    /// Largest relative one-step increase of `V` seen with α̂ ∈ Ω_r.
    pub max_v_increase: f64,
    /// Same threshold, but counted whether or not α̂ ∈ Ω_r.
    pub v_increases_any: usize,
    pub outside_simplex: usize,
}

impl StepDiagnostics {
    /// Accumulates the diagnostics of a continuation run.
    pub fn absorb(&mut self, o: &StepDiagnostics) {
        self.count += o.count;
        self.max_sum_deviation = self.max_sum_deviation.max(o.max_sum_deviation);
        self.v_increases += o.v_increases;
        self.max_v_increase = self.max_v_increase.max(o.max_v_increase);
        self.v_increases_any += o.v_increases_any;
        self.outside_simplex += o.outside_simplex;
    }
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn max_sum_deviation(&self) -> f64 {
        self.alpha_hat.iter().map(|a| (a.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Steps where `V` grew by more than `rel·V`, counted only while α̂ ∈ Ω_r.
    pub fn lyapunov_increases(&self, rel: f64) -> usize {
        (1..self.v.len())
            .filter(|&i| {
                let inside = self.alpha_hat[i - 1].iter().chain(&self.alpha_hat[i]).all(|&a| a >= 0.0);
                inside && self.v[i] - self.v[i - 1] > rel * self.v[i - 1].abs()
            })
            .count()
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.x.last().map(|v| v.as_slice())
    }
}

fn quad(m: &Mat, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// `gⱼ = −γ Σₖ α̂ₖ xᵀ M_kj x`.
pub fn g_values(real: &ControllerRealization, x: &[f64], alpha_hat: &[f64], gamma: f64) -> Vec<f64> {
    let r = real.r();
    (0..r)
        .map(|j| -gamma * (0..r).map(|k| alpha_hat[k] * quad(&real.adaptation[k][j], x)).sum::<f64>())
        .collect()
}

/// `gⱼ − mean(g)`.
pub fn adaptation_rhs(g: &[f64]) -> Vec<f64> {
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter().map(|v| v - mean).collect()
}

/// `u = Σⱼ α̂ⱼ Kⱼ x`.
pub fn control_input(real: &ControllerRealization, x: &[f64], alpha_hat: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; real.n_u()];
    for (k, &a) in real.gains.iter().zip(alpha_hat) {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui += a * (0..x.len()).map(|j| k[(i, j)] * x[j]).sum::<f64>();
        }
    }
    u
}

/// `V = xᵀ𝒫(α)x + (1/2γ)‖α̂ − α‖²`. With `γ = 0` the estimate is frozen and
/// only the state part is returned.
pub fn lyapunov_value(real: &ControllerRealization, x: &[f64], alpha: &[f64], alpha_hat: &[f64], gamma: f64) -> f64 {
    let state = quad(&real.lyapunov_matrix(alpha), x);
    if gamma == 0.0 {
        return state;
    }
    let mis: f64 = alpha_hat.iter().zip(alpha).map(|(h, a)| (h - a) * (h - a)).sum();
    state + mis / (2.0 * gamma)
}

struct Rhs<'a> {
    a: Mat,
    b: Mat,
    real: &'a ControllerRealization,
    gamma: f64,
}

impl Rhs<'_> {
    fn eval(&self, x: &[f64], ah: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u = control_input(self.real, x, ah);
        let n = x.len();
        let dx = (0..n)
            .map(|i| {
                (0..n).map(|j| self.a[(i, j)] * x[j]).sum::<f64>()
                    + (0..u.len()).map(|j| self.b[(i, j)] * u[j]).sum::<f64>()
            })
            .collect();
        let dah = if self.gamma == 0.0 {
            vec![0.0; ah.len()]
        } else {
            adaptation_rhs(&g_values(self.real, x, ah, self.gamma))
        };
        (dx, dah)
    }
}

fn axpy(y: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    y.iter().zip(d).map(|(y, d)| y + a * d).collect()
}

fn system_at(sys: &PolytopicSystem, alpha: &SimplexPoint) -> (Mat, Mat) {
    let w = alpha.as_slice();
    let a = sys.a_all().iter().zip(w).fold(Mat::zeros(sys.n_x(), sys.n_x()), |acc, (m, &c)| acc + m * c);
    let b = sys.b_all().iter().zip(w).fold(Mat::zeros(sys.n_x(), sys.n_u()), |acc, (m, &c)| acc + m * c);
    (a, b)
}

/// Classical RK4 on the augmented state `(x, α̂)`.
pub fn simulate(sys: &PolytopicSystem, real: &ControllerRealization, cfg: &SimulationConfig) -> Result<SimulationTrace> {
    let (r, nx) = (sys.r(), sys.n_x());
    if real.r() != r || real.n_x() != nx || real.n_u() != sys.n_u() {
        return Err(invalid("realization does not match the system"));
    }
    if cfg.x0.len() != nx || cfg.alpha_hat0.len() != r || cfg.alpha.len() != r {
        return Err(invalid("initial condition has the wrong dimension"));
    }
    if let AlphaProfile::Piecewise(s) = &cfg.alpha {
        if s.is_empty() || s.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(invalid("piecewise α schedule must be non-empty and sorted"));
        }
    }
    if (cfg.alpha_hat0.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(invalid("α̂0 must sum to 1"));
    }
    if !(cfg.dt > 0.0) || !(cfg.t_end >= cfg.dt) || !(cfg.gamma >= 0.0) || cfg.record_every == 0 {
        return Err(invalid("need dt > 0, t_end ≥ dt, γ ≥ 0 and record_every ≥ 1"));
    }
    if !cfg.x0.iter().chain(&cfg.alpha_hat0).all(|v| v.is_finite()) {
        return Err(invalid("non-finite initial condition"));
    }

    let steps = libm::round(cfg.t_end / cfg.dt) as usize;
    let mut tr = SimulationTrace::default();
    let mut x = cfg.x0.clone();
    let mut ah = cfg.alpha_hat0.clone();
    let record = |tr: &mut SimulationTrace, t: f64, x: &[f64], ah: &[f64], v: f64| {
        tr.t.push(t);
        tr.u.push(control_input(real, x, ah));
        tr.v.push(v);
        tr.g.push(g_values(real, x, ah, cfg.gamma));
        if ah.iter().any(|&a| a < 0.0) {
            tr.simplex_violations += 1;
        }
        tr.x.push(x.to_vec());
        tr.alpha_hat.push(ah.to_vec());
    };
    let v_at = |t: f64, x: &[f64], ah: &[f64]| lyapunov_value(real, x, cfg.alpha.at(t).as_slice(), ah, cfg.gamma);
    let inside = |ah: &[f64]| ah.iter().all(|&a| a >= 0.0);
    let mut v_prev = v_at(0.0, &x, &ah);
    let mut in_prev = inside(&ah);
    record(&mut tr, 0.0, &x, &ah, v_prev);

    let mut cached: Option<(*const SimplexPoint, Rhs)> = None;
    let h = cfg.dt;
    for s in 0..steps {
        let t = s as f64 * h;
        // α is held over the step (piecewise-constant schedules switch on the grid)
        let alpha = cfg.alpha.at(t);
        if cached.as_ref().is_none_or(|(p, _)| !core::ptr::eq(*p, alpha)) {
            let (a, b) = system_at(sys, alpha);
            cached = Some((alpha as *const _, Rhs { a, b, real, gamma: cfg.gamma }));
        }
        let f = &cached.as_ref().unwrap().1;
        let (k1x, k1a) = f.eval(&x, &ah);
        let (k2x, k2a) = f.eval(&axpy(&x, h / 2.0, &k1x), &axpy(&ah, h / 2.0, &k1a));
        let (k3x, k3a) = f.eval(&axpy(&x, h / 2.0, &k2x), &axpy(&ah, h / 2.0, &k2a));
        let (k4x, k4a) = f.eval(&axpy(&x, h, &k3x), &axpy(&ah, h, &k3a));
        for i in 0..nx {
            x[i] += h / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]);
        }
        for i in 0..r {
            ah[i] += h / 6.0 * (k1a[i] + 2.0 * k2a[i] + 2.0 * k3a[i] + k4a[i]);
        }
        if cfg.clamp_simplex {
            ah.iter_mut().for_each(|a| *a = a.max(0.0));
            let s: f64 = ah.iter().sum();
            if s > 0.0 {
                ah.iter_mut().for_each(|a| *a /= s);
            } else {
                ah = vec![1.0 / r as f64; r];
            }
        }
        let norm = crate::linalg::sqrt(x.iter().map(|v| v * v).sum::<f64>());
        if !(norm <= DIVERGENCE_NORM) || !ah.iter().all(|a| a.is_finite()) {
            tr.diverged = true;
            break;
        }
        let t1 = (s + 1) as f64 * h;
        let v = v_at(t1, &x, &ah);
        let in_now = inside(&ah);
        let d = &mut tr.steps;
        d.count += 1;
        d.max_sum_deviation = d.max_sum_deviation.max((ah.iter().sum::<f64>() - 1.0).abs());
        if !in_now {
            d.outside_simplex += 1;
        }
        if v_prev > 0.0 {
            let rel = (v - v_prev) / v_prev;
            if rel > 1e-8 {
                d.v_increases_any += 1;
            }
            if in_prev && in_now {
                d.max_v_increase = d.max_v_increase.max(rel);
                if rel > 1e-8 {
                    d.v_increases += 1;
                }
            }
        }
        v_prev = v;
        in_prev = in_now;
        if (s + 1) % cfg.record_every == 0 || s + 1 == steps {
            record(&mut tr, t1, &x, &ah, v);
        }
    }
    Ok(tr)
}
