//! Sweeps, k* bisection and trajectory runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use polyadapt_core::model::PolytopicSystem;
use polyadapt_core::sdp::SdpStatus;
use polyadapt_core::simulator::{simulate, AlphaProfile, SimulationConfig, SimulationTrace, StepDiagnostics};
use polyadapt_core::synthesis::{synthesize, ControllerRealization, SynthesisOptions, SynthesisOutcome};
use rayon::prelude::*;

use crate::formats::{
    sha256_file, write_json, write_trace_csv, CellStatus, RunConfig, SweepCell, SweepGrid, TraceManifest, TraceSummary,
};

/// `n` log-spaced points from `a` to `b` inclusive.
pub fn log_space(a: f64, b: f64, n: usize) -> Result<Vec<f64>> {
    ensure!(a > 0.0 && b > 0.0 && n > 0, "log range needs positive ends and n ≥ 1");
    if n == 1 {
        return Ok(vec![a]);
    }
    let (la, lb) = (a.log10(), b.log10());
    Ok((0..n)
        .map(|i| match i {
            0 => a,
            _ if i == n - 1 => b,
            _ => 10f64.powf(la + (lb - la) * i as f64 / (n - 1) as f64),
        })
        .collect())
}

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn lin_space(a: f64, b: f64, n: usize) -> Result<Vec<f64>> {
    ensure!(n > 0, "need at least one point");
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n)
        .map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
        .collect())
}

/// Timed synthesis mapped to a sweep cell; errors become Inconclusive.
pub fn solve_cell(sys: Result<PolytopicSystem>, opts: &SynthesisOptions) -> (SweepCell, Option<SynthesisOutcome>) {
    let start = Instant::now();
    let out = sys.and_then(|s| Ok(synthesize(&s, opts)?));
    let seconds = start.elapsed().as_secs_f64();
    match out {
        Ok(o) => {
            let margin = o.report().solver.margin();
            (SweepCell { status: o.status().into(), margin, seconds }, Some(o))
        }
        Err(_) => (SweepCell { status: CellStatus::Inconclusive, margin: f64::NEG_INFINITY, seconds }, None),
    }
}

/// Solves every `(μ, k)` cell in parallel; results are placed by cell index.
pub fn sweep<F>(mu: &[f64], k: &[f64], build: F, opts: &SynthesisOptions) -> SweepGrid
where
    F: Fn(f64) -> Result<PolytopicSystem> + Sync,
{
    sweep_outcomes(mu, k, build, opts).0
}

/// [`sweep`], also keeping each cell's synthesis outcome (μ-major, like the cells).
pub fn sweep_outcomes<F>(
    mu: &[f64],
    k: &[f64],
    build: F,
    opts: &SynthesisOptions,
) -> (SweepGrid, Vec<Option<SynthesisOutcome>>)
where
    F: Fn(f64) -> Result<PolytopicSystem> + Sync,
{
    let (cells, outcomes) = (0..mu.len() * k.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / k.len(), idx % k.len());
            let mut o = opts.clone();
            o.mu = mu[i];
            solve_cell(build(k[j]), &o)
        })
        .unzip();
    (SweepGrid { mu: mu.to_vec(), k: k.to_vec(), cells }, outcomes)
}

/// Neither end of the bisection bracket is feasible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoFeasibleK {
    pub k_lo: f64,
    pub k_hi: f64,
}

impl std::fmt::Display for NoFeasibleK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no feasible k in [{}, {}] (both ends not feasible)", self.k_lo, self.k_hi)
    }
}

impl std::error::Error for NoFeasibleK {}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub k: f64,
    pub status: CellStatus,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BisectOutcome {
    /// Largest k found Feasible.
    pub k_star: f64,
    /// Final `[feasible, not feasible]` bracket.
    pub bracket: (f64, f64),
    pub probes: Vec<Probe>,
    pub warnings: Vec<String>,
    /// Verified realization at `k_star`.
    pub realization: Option<Box<ControllerRealization>>,
}

impl BisectOutcome {
    pub fn inconclusive_probes(&self) -> usize {
        self.probes.iter().filter(|p| p.status == CellStatus::Inconclusive).count()
    }
}

/// Bisection on k with "synthesis is Feasible" as the predicate.
/// Inconclusive counts as infeasible and is reported in the warnings.
pub fn bisect_kstar<F>(k_lo: f64, k_hi: f64, tol: f64, build: F, opts: &SynthesisOptions) -> Result<BisectOutcome>
where
    F: Fn(f64) -> Result<PolytopicSystem>,
{
    ensure!(k_lo < k_hi && tol > 0.0, "need k_lo < k_hi and tol > 0");
    let mut probes = Vec::new();
    let mut warnings = Vec::new();
    let probe = |k: f64, probes: &mut Vec<Probe>, warnings: &mut Vec<String>| {
        let (cell, outcome) = solve_cell(build(k), opts);
        if cell.status == CellStatus::Inconclusive {
            warnings.push(format!("k = {k}: inconclusive, treated as infeasible"));
        }
        probes.push(Probe { k, status: cell.status, seconds: cell.seconds });
        outcome.and_then(|o| o.realization().cloned()).map(Box::new)
    };
    let lo_real = probe(k_lo, &mut probes, &mut warnings);
    let hi_real = probe(k_hi, &mut probes, &mut warnings);
    let done = |k_star, bracket, probes, warnings, realization| {
        Ok(BisectOutcome { k_star, bracket, probes, warnings, realization })
    };
    match (lo_real, hi_real) {
        (Some(_), Some(r)) => {
            warnings.push(format!("both ends feasible; widen the bracket above k = {k_hi}"));
            done(k_hi, (k_hi, f64::INFINITY), probes, warnings, Some(r))
        }
        (None, None) => Err(NoFeasibleK { k_lo, k_hi }.into()),
        (None, Some(r)) => {
            warnings.push("feasibility is not monotone in k on the probed points".into());
            done(k_hi, (k_lo, k_hi), probes, warnings, Some(r))
        }
        (Some(r), None) => {
            let (mut lo, mut hi, mut best) = (k_lo, k_hi, r);
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                match probe(mid, &mut probes, &mut warnings) {
                    Some(r) => (lo, best) = (mid, r),
                    None => hi = mid,
                }
            }
            done(lo, (lo, hi), probes, warnings, Some(best))
        }
    }
}

/// `trace.csv` → `trace.manifest.json`.
pub fn manifest_path(trace: &Path) -> PathBuf {
    trace.with_extension("manifest.json")
}

/// Simulates, then writes the trace CSV and its manifest.
pub fn run_and_record(
    sys: &PolytopicSystem,
    real: &polyadapt_core::synthesis::ControllerRealization,
    realization_file: Option<&Path>,
    cfg: &SimulationConfig,
    out: &Path,
) -> Result<(SimulationTrace, TraceManifest)> {
    let tr = simulate(sys, real, cfg)?;
    write_trace_csv(out, &tr)?;
    let manifest = TraceManifest {
        config: RunConfig::from_config(cfg),
        realization_sha256: match realization_file {
            Some(p) => sha256_file(p)?,
            None => String::new(),
        },
        trace_csv: out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        summary: TraceSummary::new(&tr, cfg.gamma),
    };
    write_json(&manifest_path(out), &manifest)?;
    Ok((tr, manifest))
}

/// Synthesize at `(k, μ)` for the example family, then simulate and record.
pub fn run_trajectory(
    k: f64,
    opts: &SynthesisOptions,
    cfg: &SimulationConfig,
    out: &Path,
) -> Result<(SimulationTrace, TraceManifest)> {
    let sys = polyadapt_core::model::example_system(k)?;
    let outcome = synthesize(&sys, opts)?;
    let Some(real) = outcome.realization() else {
        bail!(
            "synthesis at k = {k}, mu = {} is {:?}: {}",
            opts.mu,
            outcome.status(),
            outcome.report().message
        );
    };
    run_and_record(&sys, real, None, cfg, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRun {
    /// Simulated time at which the run stopped.
    pub t_end: f64,
    pub initial_norm: f64,
    pub final_norm: f64,
    pub reached: bool,
    pub diverged: bool,
    pub steps: StepDiagnostics,
}

/// Integrates in chunks of `cfg.t_end` until `‖x‖ ≤ ratio·‖x₀‖` or `max_time`.
/// With constant α the loop is autonomous, so restarting each chunk from the
/// previous end state reproduces one long run step for step.
pub fn simulate_until_decay(
    sys: &PolytopicSystem,
    real: &ControllerRealization,
    cfg: &SimulationConfig,
    ratio: f64,
    max_time: f64,
) -> Result<DecayRun> {
    ensure!(matches!(cfg.alpha, AlphaProfile::Constant(_)), "decay runs need a constant alpha");
    ensure!(ratio > 0.0 && max_time >= cfg.t_end, "need ratio > 0 and max_time ≥ chunk length");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let initial_norm = norm(&cfg.x0);
    let mut chunk = cfg.clone();
    chunk.record_every = usize::MAX;
    let mut run = DecayRun {
        t_end: 0.0,
        initial_norm,
        final_norm: initial_norm,
        reached: false,
        diverged: false,
        steps: StepDiagnostics::default(),
    };
    while run.t_end < max_time {
        let tr = simulate(sys, real, &chunk)?;
        run.steps.absorb(&tr.steps);
        run.t_end += tr.t.last().copied().unwrap_or(0.0);
        run.diverged = tr.diverged;
        let (Some(x), Some(ah)) = (tr.x.last(), tr.alpha_hat.last()) else { break };
        run.final_norm = norm(x);
        if tr.diverged {
            break;
        }
        if run.final_norm <= ratio * initial_norm {
            run.reached = true;
            break;
        }
        chunk.x0 = x.clone();
        chunk.alpha_hat0 = ah.clone();
    }
    Ok(run)
}

/// Exit code for a solver status: 0 feasible, 2 infeasible, 3 inconclusive.
pub fn status_exit_code(s: SdpStatus) -> i32 {
    match s {
        SdpStatus::Feasible => 0,
        SdpStatus::Infeasible => 2,
        SdpStatus::Inconclusive => 3,
    }
}
