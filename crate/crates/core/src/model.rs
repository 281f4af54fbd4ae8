//! Polytopic systems `ẋ = A(α)x + B(α)u`, simplex points and the worked example family.

use alloc::format;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim, invalid, Error, Result};
use crate::linalg::{all_finite, Mat};

/// Absolute tolerance on simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Tolerance on `Σα̂ = 1` for estimates produced by integration.
pub const ESTIMATE_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PolytopicSystem {
    r: usize,
    n_x: usize,
    n_u: usize,
    a: Vec<Mat>,
    b: Vec<Mat>,
}

impl PolytopicSystem {
    pub fn new(a: Vec<Mat>, b: Vec<Mat>) -> Result<Self> {
        if a.is_empty() {
            return Err(invalid("a polytopic system needs at least one vertex"));
        }
        if a.len() != b.len() {
            return Err(dim(format!("{} A vertices but {} B vertices", a.len(), b.len())));
        }
        let n_x = a[0].nrows();
        let n_u = b[0].ncols();
        if n_x == 0 || n_u == 0 {
            return Err(invalid("empty state or input dimension"));
        }
        for (i, (ai, bi)) in a.iter().zip(&b).enumerate() {
            if ai.shape() != (n_x, n_x) {
                return Err(dim(format!("A{} is {:?}, expected {n_x}x{n_x}", i + 1, ai.shape())));
            }
            if bi.shape() != (n_x, n_u) {
                return Err(dim(format!("B{} is {:?}, expected {n_x}x{n_u}", i + 1, bi.shape())));
            }
            if !all_finite(ai) || !all_finite(bi) {
                return Err(Error::NonFinite("system matrices"));
            }
        }
        Ok(Self { r: a.len(), n_x, n_u, a, b })
    }

    pub fn r(&self) -> usize {
        self.r
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn a(&self, i: usize) -> &Mat {
        &self.a[i]
    }
    pub fn b(&self, i: usize) -> &Mat {
        &self.b[i]
    }
    pub fn a_all(&self) -> &[Mat] {
        &self.a
    }
    pub fn b_all(&self) -> &[Mat] {
        &self.b
    }
}

/// A point of the unit simplex Ω_r.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(invalid("empty simplex point"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("simplex point"));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("simplex weights sum to {s}")));
        }
        if let Some(v) = w.iter().find(|&&v| v < -SIMPLEX_TOL) {
            return Err(invalid(format!("negative simplex weight {v}")));
        }
        Ok(Self(w))
    }

    pub fn vertex(r: usize, i: usize) -> Self {
        let mut w = alloc::vec![0.0; r];
        w[i] = 1.0;
        Self(w)
    }

    pub fn uniform(r: usize) -> Self {
        Self(alloc::vec![1.0 / r as f64; r])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A mismatch Δα = α̂ − α: sums to zero, entries in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPoint(Vec<f64>);

impl DeltaPoint {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("delta point"));
        }
        let s: f64 = d.iter().sum();
        if s.abs() > SIMPLEX_TOL {
            return Err(invalid(format!("delta entries sum to {s}")));
        }
        if d.iter().any(|v| v.abs() > 1.0 + SIMPLEX_TOL) {
            return Err(invalid("delta entry outside [-1, 1]"));
        }
        Ok(Self(d))
    }

    pub fn zero(r: usize) -> Self {
        Self(alloc::vec![0.0; r])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `(A(α), B(α)) = (Σαᵢ Aᵢ, Σαᵢ Bᵢ)`.
pub fn evaluate_combination(sys: &PolytopicSystem, alpha: &SimplexPoint) -> Result<(Mat, Mat)> {
    if alpha.len() != sys.r {
        return Err(dim(format!("alpha has length {}, system has r = {}", alpha.len(), sys.r)));
    }
    let mut a = Mat::zeros(sys.n_x, sys.n_x);
    let mut b = Mat::zeros(sys.n_x, sys.n_u);
    for (i, &w) in alpha.as_slice().iter().enumerate() {
        a += &sys.a[i] * w;
        b += &sys.b[i] * w;
    }
    Ok((a, b))
}

/// `Σᵢ Σⱼ αᵢ α̂ⱼ (Aᵢ + Bᵢ Kⱼ)`.
pub fn closed_loop_matrix(
    sys: &PolytopicSystem,
    gains: &[Mat],
    alpha: &SimplexPoint,
    alpha_hat: &[f64],
) -> Result<Mat> {
    let r = sys.r;
    if gains.len() != r || alpha.len() != r || alpha_hat.len() != r {
        return Err(dim("closed loop needs r gains, r weights and r estimates"));
    }
    if gains.iter().any(|k| k.shape() != (sys.n_u, sys.n_x)) {
        return Err(dim("gain shape must be n_u x n_x"));
    }
    let s: f64 = alpha_hat.iter().sum();
    if (s - 1.0).abs() > ESTIMATE_SUM_TOL {
        return Err(invalid(format!("estimates sum to {s}")));
    }
    let (a, b) = evaluate_combination(sys, alpha)?;
    let mut k = Mat::zeros(sys.n_u, sys.n_x);
    for (kj, &w) in gains.iter().zip(alpha_hat) {
        k += kj * w;
    }
    // Σᵢⱼ αᵢα̂ⱼ Aᵢ = A(α) since Σα̂ = 1
    Ok(a * s + b * k)
}

/// The 4-vertex, second-order example family parameterized by `k > 0`.
pub fn example_system(k: f64) -> Result<PolytopicSystem> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(invalid(format!("example family needs k > 0, got {k}")));
    }
    let kp = k + 1.0;
    let m = |v: [f64; 4]| Mat::from_row_slice(2, 2, &v);
    let c = |v: [f64; 2]| Mat::from_row_slice(2, 1, &v);
    let a = alloc::vec![
        m([-8.1818, 0.0, 0.0909, 0.0]),
        m([-1.6364, 0.0, 0.0909, 0.0]),
        m([10.0 * (k - 1.0) / kp, 0.0, k / kp, 0.0]),
        m([2.0 * (k - 1.0) / kp, 0.0, k / kp, 0.0]),
    ];
    let b = alloc::vec![
        c([-18.1818, 0.0909]),
        c([-3.6364, 0.0909]),
        c([-20.0 / kp, k / kp]),
        c([-4.0 / kp, k / kp]),
    ];
    PolytopicSystem::new(a, b)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn draw_simplex(r: usize, g: &mut ChaCha8Rng) -> Vec<f64> {
    // normalized exponentials are uniform on the simplex
    let mut w: Vec<f64> = (0..r)
        .map(|_| -libm::log(1.0 - g.random::<f64>()))
        .collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
    } else {
        w = alloc::vec![1.0 / r as f64; r];
    }
    // push the rounding residue into the largest entry
    let err = 1.0 - w.iter().sum::<f64>();
    let imax = (0..r).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
    w[imax] += err;
    w
}

/// Deterministic uniform draw from Ω_r.
pub fn random_simplex_point(r: usize, seed: u64) -> Result<SimplexPoint> {
    if r == 0 {
        return Err(invalid("r must be at least 1"));
    }
    SimplexPoint::new(draw_simplex(r, &mut rng(seed)))
}

/// Deterministic draw of a valid mismatch `β − α` for two random simplex points.
pub fn random_delta_point(r: usize, seed: u64) -> Result<DeltaPoint> {
    let alpha = random_simplex_point(r, seed ^ 0x9E37_79B9_7F4A_7C15)?;
    random_delta_for(&alpha, seed)
}

/// Draws Δα such that `α + Δα ∈ Ω_r`: a random fraction of the way from α
/// toward a random simplex point (valid by convexity, so nothing is rejected).
pub fn random_delta_for(alpha: &SimplexPoint, seed: u64) -> Result<DeltaPoint> {
    let r = alpha.len();
    let mut g = rng(seed);
    let beta = draw_simplex(r, &mut g);
    let s: f64 = if g.random::<f64>() < 0.25 { 1.0 } else { g.random::<f64>() };
    let mut d: Vec<f64> = beta.iter().zip(alpha.as_slice()).map(|(b, a)| s * (b - a)).collect();
    let err: f64 = d.iter().sum();
    if r > 0 {
        let imax = (0..r).max_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs())).unwrap_or(0);
        d[imax] -= err;
    }
    // keep α + Δα ≥ 0 after the rounding fix
    for (di, ai) in d.iter_mut().zip(alpha.as_slice()) {
        if ai + *di < 0.0 {
            *di = -ai;
        }
    }
    DeltaPoint::new(d)
}
