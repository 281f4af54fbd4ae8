//! JSON and CSV file formats.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use polyadapt_core::assembly::{LmiProgram, Sense, VarRole};
use polyadapt_core::geometry::{AnnihilatorKind, DeltaVertexSet};
use polyadapt_core::linalg::condition_number;
use polyadapt_core::model::PolytopicSystem;
use polyadapt_core::sdp::{smat, svec_index, SdpCone, SdpProblem, SdpStatus};
use polyadapt_core::simulator::{SimulationConfig, SimulationTrace};
use polyadapt_core::synthesis::{ControllerRealization, SynthesisReport};
use polyadapt_core::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Row-major nested rows.
pub type Rows = Vec<Vec<f64>>;

pub fn mat_to_rows(m: &Mat) -> Rows {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn rows_to_mat(rows: &Rows) -> Result<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    ensure!(rows.iter().all(|r| r.len() == nc), "ragged matrix rows");
    Ok(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn rows_to_mats(v: &[Rows]) -> Result<Vec<Mat>> {
    v.iter().map(rows_to_mat).collect()
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let mut s = String::new();
    std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_string(&mut s)?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// ---------------------------------------------------------------- systems

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemFile {
    pub r: usize,
    pub n_x: usize,
    pub n_u: usize,
    #[serde(rename = "A")]
    pub a: Vec<Rows>,
    #[serde(rename = "B")]
    pub b: Vec<Rows>,
}

impl SystemFile {
    pub fn from_system(sys: &PolytopicSystem) -> Self {
        Self {
            r: sys.r(),
            n_x: sys.n_x(),
            n_u: sys.n_u(),
            a: sys.a_all().iter().map(mat_to_rows).collect(),
            b: sys.b_all().iter().map(mat_to_rows).collect(),
        }
    }

    pub fn to_system(&self) -> Result<PolytopicSystem> {
        ensure!(self.a.len() == self.r && self.b.len() == self.r, "expected r = {} vertex matrices", self.r);
        let a = rows_to_mats(&self.a)?;
        let b = rows_to_mats(&self.b)?;
        let sys = PolytopicSystem::new(a, b)?;
        ensure!(sys.n_x() == self.n_x && sys.n_u() == self.n_u, "n_x/n_u disagree with the matrices");
        Ok(sys)
    }
}

/// `example:k=<k>` or a path to a system JSON file.
pub fn load_system(spec: &str) -> Result<(PolytopicSystem, Option<f64>)> {
    if let Some(rest) = spec.strip_prefix("example:") {
        let k: f64 = rest
            .strip_prefix("k=")
            .context("expected example:k=<value>")?
            .parse()
            .context("bad k in example:k=..")?;
        return Ok((polyadapt_core::model::example_system(k)?, Some(k)));
    }
    let f: SystemFile = read_json(Path::new(spec))?;
    Ok((f.to_system()?, None))
}

// ---------------------------------------------------------------- Δα vertices

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaVertexFile {
    pub r: usize,
    pub dq: usize,
    #[serde(rename = "H")]
    pub h: Rows,
}

impl From<&DeltaVertexSet> for DeltaVertexFile {
    fn from(s: &DeltaVertexSet) -> Self {
        Self { r: s.r, dq: s.dq, h: mat_to_rows(&s.h) }
    }
}

// ---------------------------------------------------------------- LMI dump

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableEntry {
    pub name: String,
    pub role: String,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEntry {
    pub label: String,
    pub dim: usize,
    /// `"negative_definite"` or `"positive_definite"`.
    pub sense: String,
    pub congruence: Option<Vec<f64>>,
    /// `[i, j, value]`
    pub constant: Vec<(usize, usize, f64)>,
    /// `[variable, i, j, coefficient]`
    pub terms: Vec<(usize, usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiDump {
    pub epsilon: f64,
    pub annihilator: String,
    pub n_vars: usize,
    pub variables: Vec<VariableEntry>,
    pub constraints: Vec<ConstraintEntry>,
}

pub fn annihilator_name(k: AnnihilatorKind) -> &'static str {
    match k {
        AnnihilatorKind::Coupled => "coupled",
        AnnihilatorKind::BlockDiagonal => "block-diagonal",
    }
}

pub fn parse_annihilator(s: &str) -> Result<AnnihilatorKind> {
    match s {
        "coupled" => Ok(AnnihilatorKind::Coupled),
        "block-diagonal" => Ok(AnnihilatorKind::BlockDiagonal),
        _ => bail!("unknown annihilator '{s}' (coupled | block-diagonal)"),
    }
}

impl LmiDump {
    pub fn from_program(p: &LmiProgram) -> Self {
        let variables = p
            .layout
            .vars()
            .iter()
            .map(|v| VariableEntry {
                name: v.name.clone(),
                role: match v.role {
                    VarRole::P(_) => "P",
                    VarRole::L(..) => "L",
                    VarRole::N => "N",
                    VarRole::X(_) => "X",
                    VarRole::Multiplier => "multiplier",
                }
                .into(),
                rows: v.rows,
                cols: v.cols,
                symmetric: v.symmetric,
                offset: v.offset,
                count: v.scalar_count(),
            })
            .collect();
        let constraints = p
            .constraints
            .iter()
            .map(|c| {
                let k = c.expr.constant_part();
                let mut constant = Vec::new();
                for i in 0..k.nrows() {
                    for j in 0..k.ncols() {
                        if k[(i, j)] != 0.0 {
                            constant.push((i, j, k[(i, j)]));
                        }
                    }
                }
                ConstraintEntry {
                    label: c.label.clone(),
                    dim: c.expr.shape().0,
                    sense: match c.sense {
                        Sense::NegativeDefinite => "negative_definite",
                        Sense::PositiveDefinite => "positive_definite",
                    }
                    .into(),
                    congruence: c.congruence.clone(),
                    constant,
                    terms: c.expr.terms().iter().map(|t| (t.var, t.row, t.col, t.coef)).collect(),
                }
            })
            .collect();
        Self {
            epsilon: p.epsilon,
            annihilator: annihilator_name(p.layout.kind()).into(),
            n_vars: p.layout.total(),
            variables,
            constraints,
        }
    }
}

// ---------------------------------------------------------------- SDP triplets

/// A cone `C + Σ yₚ Aₚ ⪰ 0` with plain (not svec-scaled) upper-triangle entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpConeFile {
    pub dim: usize,
    /// `[i, j, value]`, `i ≤ j`
    pub constant: Vec<(usize, usize, f64)>,
    /// `[variable, i, j, value]`, `i ≤ j`
    pub coeffs: Vec<(usize, usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpFile {
    pub n_vars: usize,
    pub cones: Vec<SdpConeFile>,
}

fn svec_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut v = vec![(0, 0); n * (n + 1) / 2];
    for i in 0..n {
        for j in i..n {
            v[svec_index(n, i, j)] = (i, j);
        }
    }
    v
}

impl SdpFile {
    pub fn from_problem(p: &SdpProblem) -> Self {
        let cones = p
            .cones
            .iter()
            .map(|c| {
                let pairs = svec_pairs(c.dim);
                let unscale = |k: usize, v: f64| {
                    let (i, j) = pairs[k];
                    if i == j {
                        v
                    } else {
                        v / std::f64::consts::SQRT_2
                    }
                };
                let m = smat(c.dim, &c.constant);
                let mut constant = Vec::new();
                for i in 0..c.dim {
                    for j in i..c.dim {
                        if m[(i, j)] != 0.0 {
                            constant.push((i, j, m[(i, j)]));
                        }
                    }
                }
                SdpConeFile {
                    dim: c.dim,
                    constant,
                    coeffs: c
                        .coeffs
                        .iter()
                        .map(|&(v, k, x)| {
                            let (i, j) = pairs[k];
                            (v, i, j, unscale(k, x))
                        })
                        .collect(),
                }
            })
            .collect();
        Self { n_vars: p.n_vars, cones }
    }

    pub fn to_problem(&self) -> Result<SdpProblem> {
        let mut cones = Vec::with_capacity(self.cones.len());
        for (ci, c) in self.cones.iter().enumerate() {
            let n = c.dim;
            let scale = |i: usize, j: usize| if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
            let mut constant = vec![0.0; n * (n + 1) / 2];
            for &(i, j, v) in &c.constant {
                let (i, j) = (i.min(j), i.max(j));
                ensure!(j < n, "cone {ci}: constant entry out of range");
                constant[svec_index(n, i, j)] += v * scale(i, j);
            }
            let mut coeffs = Vec::with_capacity(c.coeffs.len());
            for &(var, i, j, v) in &c.coeffs {
                let (i, j) = (i.min(j), i.max(j));
                ensure!(j < n, "cone {ci}: coefficient entry out of range");
                ensure!(var < self.n_vars, "cone {ci}: variable {var} out of range");
                coeffs.push((var, svec_index(n, i, j), v * scale(i, j)));
            }
            cones.push(SdpCone { dim: n, constant, coeffs });
        }
        let p = SdpProblem { n_vars: self.n_vars, cones };
        p.validate()?;
        Ok(p)
    }
}

// ---------------------------------------------------------------- realizations

pub fn status_name(s: SdpStatus) -> &'static str {
    match s {
        SdpStatus::Feasible => "feasible",
        SdpStatus::Infeasible => "infeasible",
        SdpStatus::Inconclusive => "inconclusive",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub samples: usize,
    pub worst_max_eigenvalue: f64,
    pub min_lyapunov_eigenvalue: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveMetadata {
    pub status: String,
    pub message: String,
    pub iterations: usize,
    pub t: f64,
    pub t_lower: f64,
    pub margin: f64,
    pub seconds: Option<f64>,
    pub epsilon: f64,
    pub annihilator: String,
    pub n_condition: f64,
    pub certificate: Option<CertificateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawVariables {
    #[serde(rename = "N")]
    pub n: Rows,
    #[serde(rename = "P")]
    pub p: Vec<Rows>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<Rows>>,
    #[serde(rename = "X")]
    pub x: Vec<Rows>,
    pub multiplier: Rows,
    /// Full decision vector in layout order.
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationFile {
    pub mu: f64,
    pub system: SystemFile,
    /// `K_i`
    pub gains: Vec<Rows>,
    /// `𝒫_i = N⁻ᵀ P_i N⁻¹`
    pub lyapunov: Vec<Rows>,
    /// `M_kj`, indexed `[k][j]`
    pub adaptation: Vec<Vec<Rows>>,
    pub solve: SolveMetadata,
    pub raw: RawVariables,
}

impl RealizationFile {
    pub fn new(
        sys: &PolytopicSystem,
        real: &ControllerRealization,
        report: &SynthesisReport,
        epsilon: f64,
        kind: AnnihilatorKind,
    ) -> Self {
        let sol = &report.solver;
        Self {
            mu: real.mu,
            system: SystemFile::from_system(sys),
            gains: real.gains.iter().map(mat_to_rows).collect(),
            lyapunov: real.lyapunov.iter().map(mat_to_rows).collect(),
            adaptation: real.adaptation.iter().map(|r| r.iter().map(mat_to_rows).collect()).collect(),
            solve: SolveMetadata {
                status: status_name(report.status).into(),
                message: report.message.clone(),
                iterations: sol.iterations,
                t: sol.t,
                t_lower: sol.t_lower,
                margin: sol.margin(),
                seconds: sol.wall_seconds,
                epsilon,
                annihilator: annihilator_name(kind).into(),
                n_condition: real.n_condition,
                certificate: report.certificate.as_ref().map(|c| CertificateSummary {
                    samples: c.samples,
                    worst_max_eigenvalue: c.worst_max_eigenvalue,
                    min_lyapunov_eigenvalue: c.min_lyapunov_eigenvalue,
                    pass: c.pass,
                }),
            },
            raw: RawVariables {
                n: mat_to_rows(&real.n),
                p: real.p.iter().map(mat_to_rows).collect(),
                l: real.l.iter().map(|r| r.iter().map(mat_to_rows).collect()).collect(),
                x: real.x.iter().map(mat_to_rows).collect(),
                multiplier: mat_to_rows(&real.multiplier),
                y: sol.y.clone(),
            },
        }
    }

    /// The stored gains, 𝒫ᵢ and M_kj are used as written (not re-derived), so
    /// an edited file is checked as edited.
    pub fn to_realization(&self) -> Result<(PolytopicSystem, ControllerRealization)> {
        let sys = self.system.to_system()?;
        let r = sys.r();
        ensure!(
            self.gains.len() == r && self.lyapunov.len() == r && self.adaptation.len() == r,
            "realization arrays must have r = {r} entries"
        );
        ensure!(self.adaptation.iter().all(|row| row.len() == r), "adaptation must be r × r");
        let n = rows_to_mat(&self.raw.n)?;
        let real = ControllerRealization {
            mu: self.mu,
            gains: rows_to_mats(&self.gains)?,
            n_condition: condition_number(&n),
            n,
            p: rows_to_mats(&self.raw.p)?,
            l: self.raw.l.iter().map(|row| rows_to_mats(row)).collect::<Result<_>>()?,
            x: rows_to_mats(&self.raw.x)?,
            multiplier: rows_to_mat(&self.raw.multiplier)?,
            lyapunov: rows_to_mats(&self.lyapunov)?,
            adaptation: self.adaptation.iter().map(|row| rows_to_mats(row)).collect::<Result<_>>()?,
        };
        let (nx, nu) = (sys.n_x(), sys.n_u());
        ensure!(
            real.n.shape() == (nx, nx)
                && real.gains.iter().all(|k| k.shape() == (nu, nx))
                && real.lyapunov.iter().all(|p| p.shape() == (nx, nx))
                && real.adaptation.iter().flatten().all(|m| m.shape() == (nx, nx))
                && real.p.len() == r
                && real.x.len() == r
                && real.l.len() == r,
            "realization matrices have inconsistent shapes"
        );
        Ok((sys, real))
    }
}

// ---------------------------------------------------------------- traces

pub fn write_trace_csv(path: &Path, tr: &SimulationTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let (nx, r, nu) = (
        tr.x.first().map_or(0, |v| v.len()),
        tr.alpha_hat.first().map_or(0, |v| v.len()),
        tr.u.first().map_or(0, |v| v.len()),
    );
    let mut header = vec!["t".to_string()];
    header.extend((1..=nx).map(|i| format!("x_{i}")));
    header.extend((1..=r).map(|i| format!("ahat_{i}")));
    header.extend((1..=nu).map(|i| format!("u_{i}")));
    header.push("V".into());
    w.write_record(&header)?;
    for i in 0..tr.len() {
        let mut row = vec![tr.t[i].to_string()];
        row.extend(tr.x[i].iter().map(|v| v.to_string()));
        row.extend(tr.alpha_hat[i].iter().map(|v| v.to_string()));
        row.extend(tr.u[i].iter().map(|v| v.to_string()));
        row.push(tr.v[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back `(header, rows)`.
pub fn read_trace_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = rd.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        rows.push(rec?.iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>()?);
    }
    Ok((header, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub samples: usize,
    pub steps: usize,
    pub initial_norm: f64,
    pub final_norm: f64,
    /// Over every step, not just the recorded ones.
    pub max_sum_deviation: f64,
    /// Steps with `V` increasing by more than `1e-8·V` while α̂ ∈ Ω_r.
    pub lyapunov_increases: usize,
    pub max_relative_v_increase: f64,
    /// Same count without the α̂ ∈ Ω_r condition.
    pub lyapunov_increases_any: usize,
    /// Steps ending with some α̂ⱼ < 0.
    pub simplex_violations: usize,
    pub diverged: bool,
    pub frozen_adaptation: bool,
}

impl TraceSummary {
    pub fn new(tr: &SimulationTrace, gamma: f64) -> Self {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Self {
            samples: tr.len(),
            steps: tr.steps.count,
            initial_norm: tr.x.first().map_or(0.0, |v| norm(v)),
            final_norm: tr.x.last().map_or(0.0, |v| norm(v)),
            max_sum_deviation: tr.max_sum_deviation().max(tr.steps.max_sum_deviation),
            lyapunov_increases: tr.steps.v_increases,
            max_relative_v_increase: tr.steps.max_v_increase,
            lyapunov_increases_any: tr.steps.v_increases_any,
            simplex_violations: tr.steps.outside_simplex,
            diverged: tr.diverged,
            frozen_adaptation: gamma == 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub x0: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_hat0: Vec<f64>,
    pub gamma: f64,
    pub t_end: f64,
    pub dt: f64,
    pub clamp_simplex: bool,
    pub record_every: usize,
}

impl RunConfig {
    pub fn from_config(c: &SimulationConfig) -> Self {
        Self {
            x0: c.x0.clone(),
            alpha: c.alpha.at(0.0).as_slice().to_vec(),
            alpha_hat0: c.alpha_hat0.clone(),
            gamma: c.gamma,
            t_end: c.t_end,
            dt: c.dt,
            clamp_simplex: c.clamp_simplex,
            record_every: c.record_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub config: RunConfig,
    pub realization_sha256: String,
    pub trace_csv: String,
    pub summary: TraceSummary,
}

// ---------------------------------------------------------------- sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Feasible,
    Infeasible,
    Inconclusive,
    Skipped,
}

impl From<SdpStatus> for CellStatus {
    fn from(s: SdpStatus) -> Self {
        match s {
            SdpStatus::Feasible => CellStatus::Feasible,
            SdpStatus::Infeasible => CellStatus::Infeasible,
            SdpStatus::Inconclusive => CellStatus::Inconclusive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub status: CellStatus,
    pub margin: f64,
    pub seconds: f64,
}

/// Cells are stored μ-major: `cells[i·|k| + j]` is `(mu[i], k[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub mu: Vec<f64>,
    pub k: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepRow {
    mu: f64,
    k: f64,
    status: CellStatus,
    margin: f64,
    seconds: f64,
}

impl SweepGrid {
    pub fn cell(&self, i_mu: usize, j_k: usize) -> &SweepCell {
        &self.cells[i_mu * self.k.len() + j_k]
    }

    /// Per k column: whether any μ is Feasible.
    pub fn columns_with_feasible(&self) -> Vec<bool> {
        (0..self.k.len())
            .map(|j| (0..self.mu.len()).any(|i| self.cell(i, j).status == CellStatus::Feasible))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        for (i, &mu) in self.mu.iter().enumerate() {
            for (j, &k) in self.k.iter().enumerate() {
                let c = self.cell(i, j);
                w.serialize(SweepRow { mu, k, status: c.status, margin: c.margin, seconds: c.seconds })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let mut rows = Vec::new();
        for r in rd.deserialize() {
            let r: SweepRow = r?;
            rows.push(r);
        }
        let mut mu: Vec<f64> = Vec::new();
        let mut k: Vec<f64> = Vec::new();
        for r in &rows {
            if !mu.iter().any(|&m| m.to_bits() == r.mu.to_bits()) {
                mu.push(r.mu);
            }
            if !k.iter().any(|&v| v.to_bits() == r.k.to_bits()) {
                k.push(r.k);
            }
        }
        ensure!(rows.len() == mu.len() * k.len(), "sweep CSV is not a full grid");
        let mut cells = vec![None; rows.len()];
        for r in rows {
            let i = mu.iter().position(|&m| m.to_bits() == r.mu.to_bits()).unwrap();
            let j = k.iter().position(|&v| v.to_bits() == r.k.to_bits()).unwrap();
            let slot = &mut cells[i * k.len() + j];
            ensure!(slot.is_none(), "duplicate sweep cell (mu = {}, k = {})", r.mu, r.k);
            *slot = Some(SweepCell { status: r.status, margin: r.margin, seconds: r.seconds });
        }
        Ok(Self { mu, k, cells: cells.into_iter().map(Option::unwrap).collect() })
    }
}
