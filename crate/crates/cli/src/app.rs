//! Subcommand implementations. Each returns the process exit code:
//! 0 success/feasible, 2 infeasible, 3 inconclusive; errors map to 1.

use std::time::Instant;

use anyhow::{ensure, Context, Result};
use polyadapt_core::assembly::{build_vertex_program, compile_standard_form, small_mu_map, DecisionLayout};
use polyadapt_core::geometry::enumerate_delta_vertices;
use polyadapt_core::model::{example_system, SimplexPoint};
use polyadapt_core::sdp::solve_feasibility;
use polyadapt_core::simulator::{AlphaProfile, SimulationConfig};
use polyadapt_core::synthesis::{hurwitz_check, synthesize, verify_certificate, SynthesisOutcome};

use crate::config::{parse_grid, parse_list, parse_pair, required, Cli, Command, ConfigFile};
use crate::experiments::{
    bisect_kstar, lin_space, log_space, manifest_path, run_and_record, status_exit_code, sweep, NoFeasibleK,
};
use crate::formats::{
    load_system, read_json, status_name, write_json, CellStatus, DeltaVertexFile, LmiDump, RealizationFile, SdpFile,
};

pub fn run(cli: Cli) -> Result<i32> {
    let mut command = cli.command;
    if let Some(path) = &cli.config {
        command.merge(&ConfigFile::load(path)?);
    }
    match command {
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Bisect(a) => bisect_cmd(a),
        Command::SolveSdp(a) => solve_sdp_cmd(a),
        Command::Vertices(a) => vertices_cmd(a),
    }
}

fn synthesize_cmd(a: crate::config::SynthesizeArgs) -> Result<i32> {
    let spec = required(&a.system, "system")?;
    let mu = required(&a.mu, "mu")?;
    let (sys, _) = load_system(&spec)?;
    let opts = a.solver.options(mu)?;
    if a.dump_lmi.is_some() || a.dump_sdp.is_some() {
        let layout = DecisionLayout::for_system(&sys, opts.annihilator)?;
        let prog = build_vertex_program(&sys, &layout, mu, opts.epsilon)?;
        if let Some(p) = &a.dump_lmi {
            write_json(p, &LmiDump::from_program(&prog))?;
        }
        if let Some(p) = &a.dump_sdp {
            // exactly what the solver sees, i.e. after the small-μ change of variables
            let sdp = small_mu_map(&layout, mu).substitute(&compile_standard_form(&prog)?)?;
            write_json(p, &SdpFile::from_problem(&sdp))?;
        }
    }
    let start = Instant::now();
    let mut outcome = synthesize(&sys, &opts)?;
    let secs = start.elapsed().as_secs_f64();
    match &mut outcome {
        SynthesisOutcome::Feasible(_, r) | SynthesisOutcome::Infeasible(r) | SynthesisOutcome::Inconclusive(r) => {
            r.solver.wall_seconds = Some(secs)
        }
    }
    let rep = outcome.report();
    println!("status: {}", status_name(outcome.status()));
    println!("message: {}", rep.message);
    println!(
        "iterations: {}  t: {:.4e}  t_lower: {:.4e}  margin: {:.4e}  seconds: {secs:.2}",
        rep.solver.iterations,
        rep.solver.t,
        rep.solver.t_lower,
        rep.solver.margin()
    );
    if let Some(c) = &rep.certificate {
        println!(
            "certificate: {} samples, worst max eigenvalue {:.4e}, min eig(P_i) {:.4e}, {}",
            c.samples,
            c.worst_max_eigenvalue,
            c.min_lyapunov_eigenvalue,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(real) = outcome.realization() {
        for (i, k) in real.gains.iter().enumerate() {
            println!("K_{} = {:?}", i + 1, k.iter().copied().collect::<Vec<_>>());
        }
        if let Some(out) = &a.out {
            write_json(out, &RealizationFile::new(&sys, real, rep, opts.epsilon, opts.annihilator))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(status_exit_code(outcome.status()))
}

fn verify_cmd(a: crate::config::VerifyArgs) -> Result<i32> {
    let path = required(&a.realization, "realization")?;
    let file: RealizationFile = read_json(&path)?;
    let (sys, real) = file.to_realization()?;
    let rep = verify_certificate(&sys, &real, a.samples.unwrap_or(1000), a.seed.unwrap_or(0))?;
    let hw = hurwitz_check(&sys, &real)?;
    println!(
        "certificate: {} samples, worst max eigenvalue {:.4e} at alpha {:?}, delta {:?}",
        rep.samples, rep.worst_max_eigenvalue, rep.worst_alpha, rep.worst_delta
    );
    println!("min eig(P_i): {:.4e}", rep.min_lyapunov_eigenvalue);
    println!("vertex spectral abscissas: {hw:?}");
    let ok = rep.pass && hw.iter().all(|&v| v < 0.0);
    println!("verify: {}", if ok { "pass" } else { "FAIL" });
    Ok(if ok { 0 } else { 2 })
}

fn simplex_arg(s: &Option<String>, r: usize, flag: &str) -> Result<Vec<f64>> {
    match s {
        Some(s) => {
            let v = parse_list(s)?;
            ensure!(v.len() == r, "--{flag} needs {r} entries");
            Ok(v)
        }
        None => Ok(vec![1.0 / r as f64; r]),
    }
}

fn simulate_cmd(a: crate::config::SimulateArgs) -> Result<i32> {
    let path = required(&a.realization, "realization")?;
    let out = required(&a.out, "out")?;
    let file: RealizationFile = read_json(&path)?;
    let (sys, real) = file.to_realization()?;
    let x0 = parse_list(&required(&a.x0, "x0")?)?;
    let alpha = SimplexPoint::new(simplex_arg(&a.alpha, sys.r(), "alpha")?).context("--alpha")?;
    let cfg = SimulationConfig {
        x0,
        alpha: AlphaProfile::Constant(alpha),
        alpha_hat0: simplex_arg(&a.ahat0, sys.r(), "ahat0")?,
        gamma: required(&a.gamma, "gamma")?,
        t_end: required(&a.tend, "tend")?,
        dt: a.dt.unwrap_or(1e-4),
        clamp_simplex: a.clamp_simplex.unwrap_or(false),
        record_every: a.record_every.unwrap_or(1),
    };
    let (_, m) = run_and_record(&sys, &real, Some(&path), &cfg, &out)?;
    let s = &m.summary;
    println!("steps: {}  samples written: {}", s.steps, s.samples);
    println!("final |x|: {:.6e} (initial {:.6e})", s.final_norm, s.initial_norm);
    println!("max |sum(ahat) - 1|: {:.3e}", s.max_sum_deviation);
    println!(
        "V increases beyond 1e-8*V (ahat in simplex): {} (largest relative step {:.3e})",
        s.lyapunov_increases, s.max_relative_v_increase
    );
    println!("V increases beyond 1e-8*V (any ahat): {}", s.lyapunov_increases_any);
    println!("steps with ahat outside the simplex: {}", s.simplex_violations);
    if s.frozen_adaptation {
        println!("note: gamma = 0, adaptation frozen at ahat0");
    }
    if s.diverged {
        println!("DIVERGED: trace truncated");
    }
    println!("wrote {} and {}", out.display(), manifest_path(&out).display());
    Ok(if s.diverged { 3 } else { 0 })
}

fn sweep_cmd(a: crate::config::SweepArgs) -> Result<i32> {
    let out = required(&a.out, "out")?;
    let (mu_a, mu_b) = parse_pair(a.mu_range.as_deref().unwrap_or("1e-11,1e2"))?;
    let (k_a, k_b) = parse_pair(a.k_range.as_deref().unwrap_or("1,100"))?;
    let (m, n) = parse_grid(a.grid.as_deref().unwrap_or("12x12"))?;
    let mu = log_space(mu_a, mu_b, m)?;
    let k = if a.k_log.unwrap_or(false) { log_space(k_a, k_b, n)? } else { lin_space(k_a, k_b, n)? };
    let opts = a.solver.options(mu[0])?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = a.threads {
        pool = pool.num_threads(t);
    }
    let start = Instant::now();
    let grid = pool.build()?.install(|| sweep(&mu, &k, example_system_boxed, &opts));
    grid.write_csv(&out)?;
    // rows: μ, columns: k
    for (i, m) in mu.iter().enumerate() {
        let row: String = (0..k.len())
            .map(|j| match grid.cell(i, j).status {
                CellStatus::Feasible => '#',
                CellStatus::Infeasible => '.',
                CellStatus::Inconclusive => '?',
                CellStatus::Skipped => ' ',
            })
            .collect();
        println!("{m:>10.3e} {row}");
    }
    let cols = grid.columns_with_feasible();
    println!(
        "k columns with a feasible mu: {}/{}; {:.1}s; wrote {}",
        cols.iter().filter(|&&c| c).count(),
        cols.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(0)
}

fn example_system_boxed(k: f64) -> Result<polyadapt_core::model::PolytopicSystem> {
    Ok(example_system(k)?)
}

fn bisect_cmd(a: crate::config::BisectArgs) -> Result<i32> {
    let mu = required(&a.mu, "mu")?;
    let opts = a.solver.options(mu)?;
    let (lo, hi, tol) = (a.k_lo.unwrap_or(1.0), a.k_hi.unwrap_or(2000.0), a.tol_k.unwrap_or(1.0));
    match bisect_kstar(lo, hi, tol, example_system_boxed, &opts) {
        Ok(b) => {
            for p in &b.probes {
                println!("k = {:<12} {:<12} {:.1}s", p.k, format!("{:?}", p.status).to_lowercase(), p.seconds);
            }
            for w in &b.warnings {
                println!("warning: {w}");
            }
            println!("k* = {} (bracket [{}, {}])", b.k_star, b.bracket.0, b.bracket.1);
            let degenerate = b.bracket.1.is_infinite() || b.warnings.iter().any(|w| w.contains("not monotone"));
            Ok(if degenerate { 3 } else { 0 })
        }
        Err(e) if e.downcast_ref::<NoFeasibleK>().is_some() => {
            println!("{e}");
            Ok(2)
        }
        Err(e) => Err(e),
    }
}

fn solve_sdp_cmd(a: crate::config::SolveSdpArgs) -> Result<i32> {
    let path = required(&a.problem, "problem")?;
    let file: SdpFile = read_json(&path)?;
    let problem = file.to_problem()?;
    let mut opts = polyadapt_core::sdp::SolverOptions::default();
    if let Some(v) = a.max_iter {
        opts.max_iter = v;
    }
    if let Some(v) = a.solver_tol {
        opts.tol = v;
    }
    let sol = solve_feasibility(&problem, &opts)?;
    println!("status: {}", status_name(sol.status));
    println!("message: {}", sol.message);
    println!("iterations: {}  t: {:.4e}  t_lower: {:.4e}  margin: {:.4e}", sol.iterations, sol.t, sol.t_lower, sol.margin());
    Ok(status_exit_code(sol.status))
}

fn vertices_cmd(a: crate::config::VerticesArgs) -> Result<i32> {
    let r = required(&a.r, "r")?;
    let set = enumerate_delta_vertices(r)?;
    let f = DeltaVertexFile::from(&set);
    match &a.out {
        Some(p) => write_json(p, &f)?,
        None => println!("{}", serde_json::to_string(&f)?),
    }
    Ok(0)
}
