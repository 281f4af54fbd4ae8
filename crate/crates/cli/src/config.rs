//! Command-line arguments. Every flag can also come from a JSON config file
//! with one section per subcommand, keyed by the long flag name:
//!
//! ```json
//! { "synthesize": { "system": "example:k=775", "mu": 1e-11 },
//!   "sweep": { "mu-range": "1e-11,1e2", "grid": "12x12" } }
//! ```
//!
//! Flags given on the command line win over the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use polyadapt_core::synthesis::SynthesisOptions;
use serde::Deserialize;

use crate::formats::parse_annihilator;

#[derive(Debug, Parser)]
#[command(name = "polyadapt", version, about = "Adaptive gain-scheduling synthesis for polytopic systems")]
pub struct Cli {
    /// JSON config file mirroring the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the vertex LMIs and write a realization.
    Synthesize(SynthesizeArgs),
    /// Re-check a realization's certificate by sampling.
    Verify(VerifyArgs),
    /// Simulate the adaptive closed loop of a realization.
    Simulate(SimulateArgs),
    /// Feasibility over a (μ, k) grid of the example family.
    Sweep(SweepArgs),
    /// Largest feasible k of the example family at fixed μ.
    Bisect(BisectArgs),
    /// Solve an SDP given in the sparse-triplet JSON format.
    SolveSdp(SolveSdpArgs),
    /// Write the Δα vertex set for r vertices as JSON.
    Vertices(VerticesArgs),
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SolverArgs {
    /// Strictness margin ε.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Phase-I threshold on the scaled shift.
    #[arg(long)]
    pub solver_tol: Option<f64>,
    /// coupled | block-diagonal
    #[arg(long)]
    pub annihilator: Option<String>,
    /// Certificate samples checked after a feasible solve.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SolverArgs {
    fn merge(&mut self, f: &Self) {
        merge_fields!(self, f; epsilon, max_iter, solver_tol, annihilator, samples, seed);
    }

    pub fn options(&self, mu: f64) -> Result<SynthesisOptions> {
        let mut o = SynthesisOptions::new(mu);
        if let Some(e) = self.epsilon {
            o.epsilon = e;
        }
        if let Some(v) = self.max_iter {
            o.solver.max_iter = v;
        }
        if let Some(v) = self.solver_tol {
            o.solver.tol = v;
        }
        if let Some(a) = &self.annihilator {
            o.annihilator = parse_annihilator(a)?;
        }
        if let Some(s) = self.samples {
            o.certificate_samples = s;
        }
        if let Some(s) = self.seed {
            o.seed = s;
        }
        Ok(o)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SynthesizeArgs {
    /// System JSON file or `example:k=<k>`.
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Realization JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the LMI program (debug JSON).
    #[arg(long)]
    pub dump_lmi: Option<PathBuf>,
    /// Also write the standard-form SDP as solved (sparse triplets).
    #[arg(long)]
    pub dump_sdp: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct VerifyArgs {
    #[arg(long)]
    pub realization: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SimulateArgs {
    #[arg(long)]
    pub realization: Option<PathBuf>,
    /// Adaptation gain γ (0 freezes α̂).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Initial state, comma separated.
    #[arg(long)]
    pub x0: Option<String>,
    /// True (constant) α, comma separated; default uniform.
    #[arg(long)]
    pub alpha: Option<String>,
    /// Initial estimate α̂(0), comma separated; default uniform.
    #[arg(long)]
    pub ahat0: Option<String>,
    #[arg(long)]
    pub tend: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Clip α̂ to the simplex after each step.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub clamp_simplex: Option<bool>,
    /// Write every n-th step to the CSV (diagnostics still use all steps).
    #[arg(long)]
    pub record_every: Option<usize>,
    /// Trace CSV; the manifest goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SweepArgs {
    /// `a,b` (log-spaced).
    #[arg(long)]
    pub mu_range: Option<String>,
    /// `a,b`
    #[arg(long)]
    pub k_range: Option<String>,
    /// `MxN`: M values of μ, N values of k.
    #[arg(long)]
    pub grid: Option<String>,
    /// Log-space k instead of linear.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub k_log: Option<bool>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct BisectArgs {
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub k_lo: Option<f64>,
    #[arg(long)]
    pub k_hi: Option<f64>,
    /// Bracket width at which bisection stops.
    #[arg(long = "tol")]
    #[serde(rename = "tol")]
    pub tol_k: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SolveSdpArgs {
    #[arg(long)]
    pub problem: Option<PathBuf>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub solver_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct VerticesArgs {
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub synthesize: SynthesizeArgs,
    pub verify: VerifyArgs,
    pub simulate: SimulateArgs,
    pub sweep: SweepArgs,
    pub bisect: BisectArgs,
    pub solve_sdp: SolveSdpArgs,
    pub vertices: VerticesArgs,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Section names must be subcommands and keys must be their long flags.
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value.as_object().context("config must be a JSON object")?;
        let cmd = <Cli as clap::CommandFactory>::command();
        for (section, body) in obj {
            let sub = cmd
                .get_subcommands()
                .find(|c| c.get_name() == section)
                .with_context(|| format!("unknown config section '{section}'"))?;
            let body = body.as_object().with_context(|| format!("section '{section}' must be an object"))?;
            for key in body.keys() {
                let known = sub.get_arguments().any(|a| a.get_long() == Some(key.as_str()) && key != "config");
                if !known {
                    bail!("unknown key '{key}' in section '{section}'");
                }
            }
        }
        Ok(serde_json::from_value(value)?)
    }
}

impl Command {
    /// Fills every flag that was not given from the config file.
    pub fn merge(&mut self, f: &ConfigFile) {
        match self {
            Command::Synthesize(a) => {
                let s = &f.synthesize;
                merge_fields!(a, s; system, mu, out, dump_lmi, dump_sdp);
                a.solver.merge(&s.solver);
            }
            Command::Verify(a) => {
                let s = &f.verify;
                merge_fields!(a, s; realization, samples, seed);
            }
            Command::Simulate(a) => {
                let s = &f.simulate;
                merge_fields!(a, s; realization, gamma, x0, alpha, ahat0, tend, dt, clamp_simplex, record_every, out);
            }
            Command::Sweep(a) => {
                let s = &f.sweep;
                merge_fields!(a, s; mu_range, k_range, grid, k_log, threads, out);
                a.solver.merge(&s.solver);
            }
            Command::Bisect(a) => {
                let s = &f.bisect;
                merge_fields!(a, s; mu, k_lo, k_hi, tol_k);
                a.solver.merge(&s.solver);
            }
            Command::SolveSdp(a) => {
                let s = &f.solve_sdp;
                merge_fields!(a, s; problem, max_iter, solver_tol);
            }
            Command::Vertices(a) => {
                let s = &f.vertices;
                merge_fields!(a, s; r, out);
            }
        }
    }
}

/// Missing required flag.
pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().with_context(|| format!("missing --{flag} (flag or config file)"))
}

pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad number '{p}' in '{s}'")))
        .collect()
}

pub fn parse_pair(s: &str) -> Result<(f64, f64)> {
    match parse_list(s)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => bail!("expected 'a,b', got '{s}'"),
    }
}

pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (m, n) = s.split_once(['x', 'X']).context("expected MxN")?;
    let (m, n): (usize, usize) = (m.trim().parse()?, n.trim().parse()?);
    if m == 0 || n == 0 {
        bail!("grid sizes must be positive");
    }
    Ok((m, n))
}
