//! Solve the vertex LMIs, extract the controller and check the certificate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::assembly::{build_vertex_program, compile_standard_form, small_mu_map, xdot_scale, DecisionLayout, DEFAULT_EPSILON};
use crate::error::{invalid, Result};
use crate::geometry::AnnihilatorKind;
use crate::linalg::{condition_number, he, max_eigenvalue, min_eigenvalue, spectral_abscissa, Mat};
use crate::model::{random_delta_for, random_simplex_point, PolytopicSystem};
use crate::sdp::{solve_feasibility, SdpSolution, SdpStatus, SolverOptions};

/// Realizations with `cond(N)` above this are rejected.
pub const MAX_N_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOptions {
    pub mu: f64,
    pub epsilon: f64,
    pub solver: SolverOptions,
    pub certificate_samples: usize,
    pub seed: u64,
    pub annihilator: AnnihilatorKind,
}

impl SynthesisOptions {
    pub fn new(mu: f64) -> Self {
        Self {
            mu,
            epsilon: DEFAULT_EPSILON,
            solver: SolverOptions::default(),
            certificate_samples: 1000,
            seed: 0,
            annihilator: AnnihilatorKind::default(),
        }
    }
}

/// Gains, Lyapunov blocks, adaptation matrices and the raw LMI variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerRealization {
    pub mu: f64,
    pub gains: Vec<Mat>,
    pub n: Mat,
    pub p: Vec<Mat>,
    /// `l[i][j] = Lᵢⱼ`
    pub l: Vec<Vec<Mat>>,
    pub x: Vec<Mat>,
    pub multiplier: Mat,
    /// `𝒫ᵢ = N⁻ᵀ Pᵢ N⁻¹`
    pub lyapunov: Vec<Mat>,
    /// `adaptation[k][j] = N⁻ᵀ L_kj N⁻¹ + He(N⁻ᵀ B_k K_j)`
    pub adaptation: Vec<Vec<Mat>>,
    pub n_condition: f64,
}

impl ControllerRealization {
    pub fn r(&self) -> usize {
        self.gains.len()
    }
    pub fn n_x(&self) -> usize {
        self.n.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.gains[0].nrows()
    }

    /// Builds the realization from raw variables, deriving everything else.
    pub fn from_variables(
        sys: &PolytopicSystem,
        mu: f64,
        n: Mat,
        p: Vec<Mat>,
        l: Vec<Vec<Mat>>,
        x: Vec<Mat>,
        multiplier: Mat,
    ) -> Result<Self> {
        let r = sys.r();
        if p.len() != r || l.len() != r || x.len() != r || l.iter().any(|row| row.len() != r) {
            return Err(invalid("realization variables do not match the vertex count"));
        }
        let n_condition = condition_number(&n);
        if !(n_condition <= MAX_N_CONDITION) {
            return Err(invalid(format!("N is ill-conditioned (cond = {n_condition:.3e})")));
        }
        let ninv = n.clone().try_inverse().ok_or_else(|| invalid("N is singular"))?;
        let nit = ninv.transpose();
        let gains: Vec<Mat> = x.iter().map(|xi| xi * &ninv).collect();
        let lyapunov = p
            .iter()
            .map(|pi| {
                let m = &nit * pi * &ninv;
                (&m + m.transpose()) * 0.5
            })
            .collect();
        let adaptation = (0..r)
            .map(|k| (0..r).map(|j| &nit * &l[k][j] * &ninv + he(&(&nit * sys.b(k) * &gains[j]))).collect())
            .collect();
        Ok(Self { mu, gains, n, p, l, x, multiplier, lyapunov, adaptation, n_condition })
    }

    /// Reads the variables of a solved decision vector.
    pub fn from_decision(sys: &PolytopicSystem, layout: &DecisionLayout, y: &[f64], mu: f64) -> Result<Self> {
        let r = sys.r();
        let n = layout.extract(layout.n(), y);
        let p = (0..r).map(|i| layout.extract(layout.p(i), y)).collect();
        let l = (0..r).map(|i| (0..r).map(|j| layout.extract(layout.l(i, j), y)).collect()).collect();
        let x = (0..r).map(|i| layout.extract(layout.x(i), y)).collect();
        let mult = layout.extract(layout.multiplier(), y);
        Self::from_variables(sys, mu, n, p, l, x, mult)
    }

    /// `𝒫(α) = Σ αᵢ 𝒫ᵢ`.
    pub fn lyapunov_matrix(&self, alpha: &[f64]) -> Mat {
        let n = self.n_x();
        self.lyapunov.iter().zip(alpha).fold(Mat::zeros(n, n), |acc, (p, &a)| acc + p * a)
    }

    /// `max |KᵢN − Xᵢ| / max(1, max |Xᵢ|)` over i.
    pub fn extraction_error(&self) -> f64 {
        self.gains
            .iter()
            .zip(&self.x)
            .map(|(k, x)| (k * &self.n - x).abs().max() / x.abs().max().max(1.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub samples: usize,
    /// Largest eigenvalue seen over all samples (must be negative).
    pub worst_max_eigenvalue: f64,
    pub worst_alpha: Vec<f64>,
    pub worst_delta: Vec<f64>,
    /// Smallest eigenvalue over the Lyapunov blocks 𝒫ᵢ.
    pub min_lyapunov_eigenvalue: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisReport {
    pub status: SdpStatus,
    pub solver: SdpSolution,
    pub certificate: Option<CertificateReport>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthesisOutcome {
    Feasible(alloc::boxed::Box<ControllerRealization>, SynthesisReport),
    Infeasible(SynthesisReport),
    Inconclusive(SynthesisReport),
}

impl SynthesisOutcome {
    pub fn status(&self) -> SdpStatus {
        match self {
            SynthesisOutcome::Feasible(..) => SdpStatus::Feasible,
            SynthesisOutcome::Infeasible(_) => SdpStatus::Infeasible,
            SynthesisOutcome::Inconclusive(_) => SdpStatus::Inconclusive,
        }
    }

    pub fn report(&self) -> &SynthesisReport {
        match self {
            SynthesisOutcome::Feasible(_, r) | SynthesisOutcome::Infeasible(r) | SynthesisOutcome::Inconclusive(r) => r,
        }
    }

    pub fn realization(&self) -> Option<&ControllerRealization> {
        match self {
            SynthesisOutcome::Feasible(r, _) => Some(r),
            _ => None,
        }
    }
}

/// Assemble, solve, extract `Kᵢ = XᵢN⁻¹`, then verify; an unverified
/// realization is demoted to `Inconclusive`. The returned variables are
/// scaled so that `max λ(𝒫ᵢ) = 1` (gains are scale invariant).
pub fn synthesize(sys: &PolytopicSystem, opts: &SynthesisOptions) -> Result<SynthesisOutcome> {
    if sys.r() < 2 {
        return Err(invalid("synthesis needs r ≥ 2"));
    }
    if !(opts.mu > 0.0) || !(opts.epsilon > 0.0) {
        return Err(invalid("mu and epsilon must be positive"));
    }
    let layout = DecisionLayout::for_system(sys, opts.annihilator)?;
    let program = build_vertex_program(sys, &layout, opts.mu, opts.epsilon)?;
    let map = small_mu_map(&layout, opts.mu);
    let sdp = map.substitute(&compile_standard_form(&program)?)?;
    let mut sol = solve_feasibility(&sdp, &opts.solver)?;
    // report the layout's variables, not the solver's
    sol.y = map.apply(&sol.y);
    let mut report = SynthesisReport { status: sol.status, message: sol.message.clone(), solver: sol, certificate: None };
    match report.status {
        SdpStatus::Infeasible => return Ok(SynthesisOutcome::Infeasible(report)),
        SdpStatus::Inconclusive => return Ok(SynthesisOutcome::Inconclusive(report)),
        SdpStatus::Feasible => {}
    }
    // the LMIs are homogeneous: scale all variables so that max λ(𝒫ᵢ) = 1
    if let Ok(pre) = ControllerRealization::from_decision(sys, &layout, &report.solver.y, opts.mu) {
        let mut top = 0.0f64;
        for p in &pre.lyapunov {
            top = top.max(max_eigenvalue(p)?);
        }
        if top.is_finite() && top > 0.0 {
            report.solver.y.iter_mut().for_each(|v| *v *= top);
        }
    }
    let real = match ControllerRealization::from_decision(sys, &layout, &report.solver.y, opts.mu) {
        Ok(r) => r,
        Err(e) => {
            report.status = SdpStatus::Inconclusive;
            report.message = format!("feasible point but extraction failed: {e}");
            return Ok(SynthesisOutcome::Inconclusive(report));
        }
    };
    let cert = verify_certificate(sys, &real, opts.certificate_samples, opts.seed)?;
    let pass = cert.pass;
    report.certificate = Some(cert);
    if !pass {
        report.status = SdpStatus::Inconclusive;
        report.message = String::from("feasible point failed certificate verification");
        return Ok(SynthesisOutcome::Inconclusive(report));
    }
    Ok(SynthesisOutcome::Feasible(alloc::boxed::Box::new(real), report))
}

/// `Σᵢⱼ αᵢαⱼ Q̂ᵢⱼ − ΔαᵢΔαⱼ Ψᵢⱼ − αᵢΔαⱼ Φᵢⱼ` evaluated from the realization's
/// matrices, with `Xⱼ = KⱼN` so that the gains themselves are checked.
pub fn certificate_matrix(sys: &PolytopicSystem, real: &ControllerRealization, alpha: &[f64], delta: &[f64]) -> Mat {
    let r = sys.r();
    let nx = sys.n_x();
    let mu = real.mu;
    let n = &real.n;
    let mut out = Mat::zeros(2 * nx, 2 * nx);
    for i in 0..r {
        for j in 0..r {
            let (aa, dd, ad) = (alpha[i] * alpha[j], delta[i] * delta[j], alpha[i] * delta[j]);
            if aa == 0.0 && dd == 0.0 && ad == 0.0 {
                continue;
            }
            let xj = &real.gains[j] * n;
            let bx = sys.b(i) * &xj;
            let cl = sys.a(i) * n + &bx;
            let lij = &real.l[i][j];
            // Q̂ᵢⱼ
            let q21 = &real.p[i] - n.transpose() + &cl * mu;
            let mut q = Mat::zeros(2 * nx, 2 * nx);
            q.view_mut((0, 0), (nx, nx)).copy_from(&he(&cl));
            q.view_mut((nx, 0), (nx, nx)).copy_from(&q21);
            q.view_mut((0, nx), (nx, nx)).copy_from(&q21.transpose());
            q.view_mut((nx, nx), (nx, nx)).copy_from(&(he(n) * -mu));
            // Ψᵢⱼ, Φᵢⱼ
            let mut psi = Mat::zeros(2 * nx, 2 * nx);
            psi.view_mut((0, 0), (nx, nx)).copy_from(&(he(&bx) + lij));
            let mut phi = Mat::zeros(2 * nx, 2 * nx);
            phi.view_mut((0, 0), (nx, nx)).copy_from(lij);
            phi.view_mut((nx, 0), (nx, nx)).copy_from(&(&bx * -mu));
            phi.view_mut((0, nx), (nx, nx)).copy_from(&(bx.transpose() * -mu));
            out += q * aa - psi * dd - phi * ad;
        }
    }
    (&out + out.transpose()) * 0.5
}

/// Samples valid `(α, Δα)` pairs (all vertex-to-vertex pairs first) and
/// checks that the certificate matrix is negative definite at each. The
/// eigenvalues are those of `D M D` with `D = diag(I, I/√μ)` for `μ < 1`.
pub fn verify_certificate(
    sys: &PolytopicSystem,
    real: &ControllerRealization,
    n_samples: usize,
    seed: u64,
) -> Result<CertificateReport> {
    let r = sys.r();
    if real.r() != r || real.n_x() != sys.n_x() || real.n_u() != sys.n_u() {
        return Err(invalid("realization does not match the system"));
    }
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for m in 0..r {
        for t in 0..r {
            let mut a = alloc::vec![0.0; r];
            a[m] = 1.0;
            let mut d = alloc::vec![0.0; r];
            d[t] += 1.0;
            d[m] -= 1.0;
            pairs.push((a, d));
        }
    }
    let mut k = 0u64;
    while pairs.len() < n_samples {
        let a = random_simplex_point(r, seed.wrapping_mul(7919).wrapping_add(2 * k))?;
        let d = random_delta_for(&a, seed.wrapping_mul(7919).wrapping_add(2 * k + 1))?;
        pairs.push((a.as_slice().to_vec(), d.as_slice().to_vec()));
        k += 1;
    }
    let s = xdot_scale(real.mu);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_pair = (Vec::new(), Vec::new());
    for (a, d) in &pairs {
        let mut m = certificate_matrix(sys, real, a, d);
        // same inertia as the unscaled matrix, far better conditioned for small μ
        let nx = sys.n_x();
        for i in 0..2 * nx {
            for j in 0..2 * nx {
                m[(i, j)] *= if i >= nx { s } else { 1.0 } * if j >= nx { s } else { 1.0 };
            }
        }
        let e = max_eigenvalue(&m)?;
        if e > worst || !e.is_finite() {
            worst = e;
            worst_pair = (a.clone(), d.clone());
        }
    }
    let mut min_lyap = f64::INFINITY;
    for p in &real.lyapunov {
        min_lyap = min_lyap.min(min_eigenvalue(p)?);
    }
    Ok(CertificateReport {
        samples: pairs.len(),
        worst_max_eigenvalue: worst,
        worst_alpha: worst_pair.0,
        worst_delta: worst_pair.1,
        min_lyapunov_eigenvalue: min_lyap,
        pass: worst < 0.0 && min_lyap > 0.0,
    })
}

/// Spectral abscissa of `Aᵢ + BᵢKᵢ` for every vertex.
pub fn hurwitz_check(sys: &PolytopicSystem, real: &ControllerRealization) -> Result<Vec<f64>> {
    if real.r() != sys.r() {
        return Err(invalid("realization does not match the system"));
    }
    (0..sys.r()).map(|i| spectral_abscissa(&(sys.a(i) + sys.b(i) * &real.gains[i]))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn trivial_realization(sys: &PolytopicSystem, gains: Vec<Mat>) -> ControllerRealization {
        let r = sys.r();
        let nx = sys.n_x();
        let n = Mat::identity(nx, nx);
        let x = gains.iter().map(|k| k * &n).collect();
        let p = vec![Mat::identity(nx, nx); r];
        let l = vec![vec![Mat::zeros(nx, nx); r]; r];
        ControllerRealization::from_variables(sys, 1.0, n, p, l, x, Mat::zeros(1, 1)).unwrap()
    }

    #[test]
    fn hurwitz_of_stable_vertex() {
        let a = vec![-Mat::identity(2, 2), -Mat::identity(2, 2)];
        let b = vec![Mat::zeros(2, 1), Mat::zeros(2, 1)];
        let sys = PolytopicSystem::new(a, b).unwrap();
        let k = Mat::from_row_slice(1, 2, &[3.0, -7.0]);
        let real = trivial_realization(&sys, vec![k.clone(), k]);
        let h = hurwitz_check(&sys, &real).unwrap();
        assert!(h.iter().all(|&v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_gain_on_unstable_vertex_fails() {
        let a = vec![Mat::identity(2, 2), Mat::identity(2, 2)];
        let b = vec![Mat::from_row_slice(2, 1, &[1.0, 0.0]); 2];
        let sys = PolytopicSystem::new(a, b).unwrap();
        let real = trivial_realization(&sys, vec![Mat::zeros(1, 2); 2]);
        assert!(hurwitz_check(&sys, &real).unwrap().iter().all(|&v| v > 0.0));
        assert!(!verify_certificate(&sys, &real, 20, 1).unwrap().pass);
    }

    #[test]
    fn vertex_sample_reduces_to_qhat() {
        let sys = crate::model::example_system(2.0).unwrap();
        let k = Mat::from_row_slice(1, 2, &[0.3, -0.1]);
        let real = trivial_realization(&sys, vec![k; 4]);
        let m = certificate_matrix(&sys, &real, &[1.0, 0.0, 0.0, 0.0], &[0.0; 4]);
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let mut y = vec![0.0; lay.total()];
        lay.insert(lay.n(), &real.n, &mut y);
        lay.insert(lay.p(0), &real.p[0], &mut y);
        lay.insert(lay.x(0), &real.x[0], &mut y);
        let q = crate::assembly::build_qhat(&sys, &lay, 1.0, 0, 0).unwrap().evaluate(&y);
        assert!((m - crate::linalg::sym_part(&q)).abs().max() < 1e-13);
    }

    #[test]
    fn singular_n_rejected() {
        let sys = crate::model::example_system(2.0).unwrap();
        let z = Mat::zeros(2, 2);
        let res = ControllerRealization::from_variables(
            &sys,
            1.0,
            z.clone(),
            vec![z.clone(); 4],
            vec![vec![z.clone(); 4]; 4],
            vec![Mat::zeros(1, 2); 4],
            Mat::zeros(1, 1),
        );
        assert!(res.is_err());
    }
}
