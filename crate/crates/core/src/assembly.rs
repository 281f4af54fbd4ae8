//! Affine matrix expressions over a registry of matrix decision variables, and
//! the assembly of the lifted vertex LMIs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{dim, invalid, Result};
use crate::geometry::{annihilator_rows, combined_at_vertex, enumerate_delta_vertices, AnnihilatorKind};
use crate::linalg::{sqrt, Mat};
use crate::model::PolytopicSystem;
use crate::sdp::{svec_index, SdpCone, SdpProblem};

/// Default strictness margin.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarRole {
    P(usize),
    L(usize, usize),
    N,
    X(usize),
    Multiplier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixVar {
    pub role: VarRole,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
    pub offset: usize,
}

impl MatrixVar {
    pub fn scalar_count(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    /// Flat index of entry `(i, j)`; symmetric variables map both triangles to
    /// the upper one.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.rows && j < self.cols);
        if self.symmetric {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.offset + a * self.rows - a * a.saturating_sub(1) / 2 - a + b
        } else {
            self.offset + i * self.cols + j
        }
    }
}

/// Variables `Pᵢ, Lᵢⱼ, N, Xᵢ, 𝒩` laid out contiguously in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLayout {
    r: usize,
    n_x: usize,
    n_u: usize,
    kind: AnnihilatorKind,
    vars: Vec<MatrixVar>,
    total: usize,
}

impl DecisionLayout {
    pub fn new(r: usize, n_x: usize, n_u: usize, kind: AnnihilatorKind) -> Result<Self> {
        if r < 2 {
            return Err(invalid("synthesis needs r ≥ 2 vertices"));
        }
        if n_x == 0 || n_u == 0 {
            return Err(invalid("empty state or input dimension"));
        }
        let mut vars = Vec::new();
        let mut off = 0;
        let mut push = |role, name: String, rows, cols, symmetric| {
            let v = MatrixVar { role, name, rows, cols, symmetric, offset: off };
            off += v.scalar_count();
            vars.push(v);
        };
        for i in 0..r {
            push(VarRole::P(i), format!("P{}", i + 1), n_x, n_x, true);
        }
        for i in 0..r {
            for j in 0..r {
                push(VarRole::L(i, j), format!("L{}{}", i + 1, j + 1), n_x, n_x, false);
            }
        }
        push(VarRole::N, "N".into(), n_x, n_x, false);
        for i in 0..r {
            push(VarRole::X(i), format!("X{}", i + 1), n_u, n_x, false);
        }
        let cols = annihilator_rows(r, n_x, kind);
        push(VarRole::Multiplier, "Nmult".into(), 4 * n_x * r, cols, false);
        Ok(Self { r, n_x, n_u, kind, vars, total: off })
    }

    pub fn for_system(sys: &PolytopicSystem, kind: AnnihilatorKind) -> Result<Self> {
        Self::new(sys.r(), sys.n_x(), sys.n_u(), kind)
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
    pub fn kind(&self) -> AnnihilatorKind {
        self.kind
    }
    pub fn total(&self) -> usize {
        self.total
    }
    pub fn vars(&self) -> &[MatrixVar] {
        &self.vars
    }

    pub fn p(&self, i: usize) -> &MatrixVar {
        &self.vars[i]
    }
    pub fn l(&self, i: usize, j: usize) -> &MatrixVar {
        &self.vars[self.r + i * self.r + j]
    }
    pub fn n(&self) -> &MatrixVar {
        &self.vars[self.r + self.r * self.r]
    }
    pub fn x(&self, i: usize) -> &MatrixVar {
        &self.vars[self.r + self.r * self.r + 1 + i]
    }
    pub fn multiplier(&self) -> &MatrixVar {
        &self.vars[self.vars.len() - 1]
    }

    /// Reads a matrix variable out of a flat decision vector.
    pub fn extract(&self, v: &MatrixVar, y: &[f64]) -> Mat {
        Mat::from_fn(v.rows, v.cols, |i, j| y[v.index(i, j)])
    }

    /// Writes a matrix into the flat vector (upper triangle for symmetric variables).
    pub fn insert(&self, v: &MatrixVar, m: &Mat, y: &mut [f64]) {
        for i in 0..v.rows {
            for j in 0..v.cols {
                if !v.symmetric || i <= j {
                    y[v.index(i, j)] = m[(i, j)];
                }
            }
        }
    }

    /// Name of the matrix variable holding scalar `k`, with the entry position.
    pub fn describe(&self, k: usize) -> Option<(&MatrixVar, usize, usize)> {
        let v = self.vars.iter().rev().find(|v| v.offset <= k)?;
        if k >= v.offset + v.scalar_count() {
            return None;
        }
        let local = k - v.offset;
        if v.symmetric {
            let mut rem = local;
            for a in 0..v.rows {
                let len = v.rows - a;
                if rem < len {
                    return Some((v, a, a + rem));
                }
                rem -= len;
            }
            None
        } else {
            Some((v, local / v.cols, local % v.cols))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub var: usize,
    pub row: usize,
    pub col: usize,
    pub coef: f64,
}

/// `C + Σₖ yₖ Aₖ` with sparse coefficient matrices, stored as a flat term list.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrixExpr {
    rows: usize,
    cols: usize,
    constant: Mat,
    terms: Vec<Term>,
}

impl AffineMatrixExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, constant: Mat::zeros(rows, cols), terms: Vec::new() }
    }

    pub fn constant(m: Mat) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), constant: m, terms: Vec::new() }
    }

    /// The matrix variable itself.
    pub fn var(v: &MatrixVar) -> Self {
        let mut e = Self::zeros(v.rows, v.cols);
        for i in 0..v.rows {
            for j in 0..v.cols {
                e.terms.push(Term { var: v.index(i, j), row: i, col: j, coef: 1.0 });
            }
        }
        e
    }

    /// Single scalar variable times a constant matrix.
    pub fn scalar_times(var: usize, m: &Mat) -> Self {
        let mut e = Self::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != 0.0 {
                    e.terms.push(Term { var, row: i, col: j, coef: m[(i, j)] });
                }
            }
        }
        e
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn constant_part(&self) -> &Mat {
        &self.constant
    }
    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn add(&self, o: &Self) -> Self {
        assert_eq!(self.shape(), o.shape(), "expression shapes differ");
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&o.terms);
        Self { rows: self.rows, cols: self.cols, constant: &self.constant + &o.constant, terms }
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            constant: &self.constant * s,
            terms: self.terms.iter().map(|t| Term { coef: t.coef * s, ..*t }).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            constant: self.constant.transpose(),
            terms: self.terms.iter().map(|t| Term { row: t.col, col: t.row, ..*t }).collect(),
        }
    }

    /// `E + Eᵀ`.
    pub fn he(&self) -> Self {
        self.add(&self.transpose())
    }

    /// `M · E`.
    pub fn left_mul(&self, m: &Mat) -> Self {
        assert_eq!(m.ncols(), self.rows, "left factor has wrong width");
        let mut terms = Vec::with_capacity(self.terms.len() * m.nrows());
        for t in &self.terms {
            for k in 0..m.nrows() {
                let a = m[(k, t.row)];
                if a != 0.0 {
                    terms.push(Term { row: k, coef: a * t.coef, ..*t });
                }
            }
        }
        let mut e = Self { rows: m.nrows(), cols: self.cols, constant: m * &self.constant, terms };
        e.canonicalize();
        e
    }

    /// `E · M`.
    pub fn right_mul(&self, m: &Mat) -> Self {
        assert_eq!(m.nrows(), self.cols, "right factor has wrong height");
        // nonzeros of each row of m
        let nz: Vec<Vec<(usize, f64)>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| (j, m[(i, j)])).collect())
            .collect();
        let mut terms = Vec::with_capacity(self.terms.len() * 2);
        for t in &self.terms {
            for &(k, a) in &nz[t.col] {
                terms.push(Term { col: k, coef: a * t.coef, ..*t });
            }
        }
        let mut e = Self { rows: self.rows, cols: m.ncols(), constant: &self.constant * m, terms };
        e.canonicalize();
        e
    }

    /// Adds `block` with its top-left corner at `(r0, c0)`.
    pub fn add_block(&mut self, r0: usize, c0: usize, block: &Self) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols, "block out of range");
        let mut v = self.constant.view_mut((r0, c0), (block.rows, block.cols));
        v += &block.constant;
        self.terms.extend(block.terms.iter().map(|t| Term { row: t.row + r0, col: t.col + c0, ..*t }));
    }

    /// Block matrix from a grid of optional blocks (missing blocks are zero).
    pub fn from_blocks(grid: &[&[Option<&Self>]], row_sizes: &[usize], col_sizes: &[usize]) -> Self {
        let rows = row_sizes.iter().sum();
        let cols = col_sizes.iter().sum();
        let mut e = Self::zeros(rows, cols);
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (bj, blk) in row.iter().enumerate() {
                if let Some(b) = blk {
                    assert_eq!(b.shape(), (row_sizes[bi], col_sizes[bj]), "block size mismatch");
                    e.add_block(r0, c0, b);
                }
                c0 += col_sizes[bj];
            }
            r0 += row_sizes[bi];
        }
        e.canonicalize();
        e
    }

    /// Sorts terms by (variable, row, column), merges duplicates, drops zeros.
    pub fn canonicalize(&mut self) {
        self.terms.sort_unstable_by_key(|t| (t.var, t.row, t.col));
        let mut out: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in self.terms.drain(..) {
            match out.last_mut() {
                Some(l) if l.var == t.var && l.row == t.row && l.col == t.col => l.coef += t.coef,
                _ => out.push(t),
            }
        }
        out.retain(|t| t.coef != 0.0);
        self.terms = out;
    }

    pub fn max_var(&self) -> Option<usize> {
        self.terms.iter().map(|t| t.var).max()
    }

    pub fn evaluate(&self, y: &[f64]) -> Mat {
        let mut m = self.constant.clone();
        for t in &self.terms {
            m[(t.row, t.col)] += t.coef * y[t.var];
        }
        m
    }
}

/// `AᵢN + BᵢXⱼ`.
fn closed_loop_block(sys: &PolytopicSystem, layout: &DecisionLayout, i: usize, j: usize) -> AffineMatrixExpr {
    let n = AffineMatrixExpr::var(layout.n());
    let x = AffineMatrixExpr::var(layout.x(j));
    n.left_mul(sys.a(i)).add(&x.left_mul(sys.b(i)))
}

fn check_indices(sys: &PolytopicSystem, layout: &DecisionLayout, mu: f64, i: usize, j: usize) -> Result<()> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(invalid(format!("mu must be positive, got {mu}")));
    }
    if (sys.r(), sys.n_x(), sys.n_u()) != (layout.r(), layout.n_x(), layout.n_u()) {
        return Err(dim("layout does not match the system"));
    }
    if i >= sys.r() || j >= sys.r() {
        return Err(invalid(format!("vertex pair ({i}, {j}) out of range")));
    }
    Ok(())
}

/// `Q̂ᵢⱼ = [[He(AᵢN + BᵢXⱼ), ⋆], [Pᵢ − Nᵀ + μ(AᵢN + BᵢXⱼ), −μ(N + Nᵀ)]]`.
pub fn build_qhat(sys: &PolytopicSystem, layout: &DecisionLayout, mu: f64, i: usize, j: usize) -> Result<AffineMatrixExpr> {
    check_indices(sys, layout, mu, i, j)?;
    let n_x = sys.n_x();
    let cl = closed_loop_block(sys, layout, i, j);
    let n = AffineMatrixExpr::var(layout.n());
    let q11 = cl.he();
    let q21 = AffineMatrixExpr::var(layout.p(i)).sub(&n.transpose()).add(&cl.scale(mu));
    let q12 = q21.transpose();
    let q22 = n.he().scale(-mu);
    let s = [n_x, n_x];
    Ok(AffineMatrixExpr::from_blocks(&[&[Some(&q11), Some(&q12)], &[Some(&q21), Some(&q22)]], &s, &s))
}

/// `Ψᵢⱼ = [[He(BᵢXⱼ) + Lᵢⱼ, 0], [0, 0]]` and
/// `Φᵢⱼ = [[Lᵢⱼ, (−μBᵢXⱼ)ᵀ], [−μBᵢXⱼ, 0]]`.
pub fn build_psi_phi(
    sys: &PolytopicSystem,
    layout: &DecisionLayout,
    mu: f64,
    i: usize,
    j: usize,
) -> Result<(AffineMatrixExpr, AffineMatrixExpr)> {
    check_indices(sys, layout, mu, i, j)?;
    let n_x = sys.n_x();
    let bx = AffineMatrixExpr::var(layout.x(j)).left_mul(sys.b(i));
    let l = AffineMatrixExpr::var(layout.l(i, j));
    let psi11 = bx.he().add(&l);
    let s = [n_x, n_x];
    let psi = AffineMatrixExpr::from_blocks(&[&[Some(&psi11), None], &[None, None]], &s, &s);
    let phi21 = bx.scale(-mu);
    let phi12 = phi21.transpose();
    let phi = AffineMatrixExpr::from_blocks(&[&[Some(&l), Some(&phi12)], &[Some(&phi21), None]], &s, &s);
    Ok((psi, phi))
}

/// The lifted matrix Θ of size `4n_x r`, ordered `[α ⊗ (x, ẋ); Δα ⊗ (x, ẋ)]`:
/// `Θ = [[½He[Q̂], −½[Φ]], [−½[Φ]ᵀ, −½He[Ψ]]]`, so that
/// `ζᵀΘζ = ΣαᵢαⱼQ̂ᵢⱼ − ΣΔαᵢΔαⱼΨᵢⱼ − ΣαᵢΔαⱼΦᵢⱼ` for `ζ = [α ⊗ I; Δα ⊗ I]`.
pub fn build_theta(sys: &PolytopicSystem, layout: &DecisionLayout, mu: f64) -> Result<AffineMatrixExpr> {
    let r = sys.r();
    let b = 2 * sys.n_x();
    check_indices(sys, layout, mu, 0, 0)?;
    let mut th = AffineMatrixExpr::zeros(2 * r * b, 2 * r * b);
    let mut q = Vec::with_capacity(r * r);
    let mut pp = Vec::with_capacity(r * r);
    for i in 0..r {
        for j in 0..r {
            q.push(build_qhat(sys, layout, mu, i, j)?);
            pp.push(build_psi_phi(sys, layout, mu, i, j)?);
        }
    }
    for i in 0..r {
        for j in 0..r {
            let he_q = q[i * r + j].add(&q[j * r + i].transpose()).scale(0.5);
            th.add_block(i * b, j * b, &he_q);
            let he_psi = pp[i * r + j].0.add(&pp[j * r + i].0.transpose()).scale(-0.5);
            th.add_block((r + i) * b, (r + j) * b, &he_psi);
            let phi = pp[i * r + j].1.scale(-0.5);
            th.add_block(i * b, (r + j) * b, &phi);
            th.add_block((r + j) * b, i * b, &phi.transpose());
        }
    }
    th.canonicalize();
    Ok(th)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// `expr ≺ −εI`
    NegativeDefinite,
    /// `expr ≻ εI`
    PositiveDefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiConstraint {
    pub label: String,
    pub expr: AffineMatrixExpr,
    pub sense: Sense,
    /// Optional diagonal congruence `D` applied when compiling (`D G D ⪰ 0`
    /// is equivalent to `G ⪰ 0`); used to balance the ẋ coordinates.
    pub congruence: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiProgram {
    pub constraints: Vec<LmiConstraint>,
    pub epsilon: f64,
    pub layout: DecisionLayout,
}

impl LmiProgram {
    /// Canonical-side matrix `G(y)` that must be positive semidefinite:
    /// `D(−E)D − εI` or `DED − εI`, with `D` the optional congruence.
    pub fn canonical(&self, c: usize, y: &[f64]) -> Mat {
        let con = &self.constraints[c];
        let e = con.expr.evaluate(y);
        let mut e = (&e + e.transpose()) * 0.5;
        if con.sense == Sense::NegativeDefinite {
            e = -e;
        }
        let n = e.nrows();
        if let Some(d) = &con.congruence {
            for i in 0..n {
                for j in 0..n {
                    e[(i, j)] *= d[i] * d[j];
                }
            }
        }
        e - Mat::identity(n, n) * self.epsilon
    }
}

/// Scale applied to the ẋ coordinates of the vertex LMIs.
pub fn xdot_scale(mu: f64) -> f64 {
    if mu < 1.0 {
        1.0 / sqrt(mu)
    } else {
        1.0
    }
}

/// Vertex LMI `Θ + He(𝒩 ℬ_{mℓ}) ≺ −εI` for simplex vertex m and Δα vertex l.
pub fn vertex_constraint_expr(theta: &AffineMatrixExpr, layout: &DecisionLayout, annihilator: &Mat) -> AffineMatrixExpr {
    let nm = AffineMatrixExpr::var(layout.multiplier()).right_mul(annihilator);
    let mut e = theta.add(&nm.he());
    e.canonicalize();
    e
}

/// The finite family: `Pᵢ ≻ εI` and, for every (m, ℓ), the vertex LMI.
pub fn build_vertex_program(sys: &PolytopicSystem, layout: &DecisionLayout, mu: f64, eps: f64) -> Result<LmiProgram> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid(format!("epsilon must be positive, got {eps}")));
    }
    let theta = build_theta(sys, layout, mu)?;
    let h = enumerate_delta_vertices(sys.r())?;
    let n_x = sys.n_x();
    let mut constraints = Vec::with_capacity(sys.r() * (1 + h.dq));
    for i in 0..sys.r() {
        constraints.push(LmiConstraint {
            label: format!("P{} > eps I", i + 1),
            expr: AffineMatrixExpr::var(layout.p(i)),
            sense: Sense::PositiveDefinite,
            congruence: None,
        });
    }
    let s = xdot_scale(mu);
    let d: Vec<f64> = (0..2 * sys.r())
        .flat_map(|_| (0..2 * n_x).map(move |c| if c < n_x { 1.0 } else { s }))
        .collect();
    for m in 0..sys.r() {
        for l in 0..h.dq {
            let b = combined_at_vertex(m, l, &h, n_x, layout.kind())?;
            constraints.push(LmiConstraint {
                label: format!("vertex m={} l={}", m + 1, l + 1),
                expr: vertex_constraint_expr(&theta, layout, &b),
                sense: Sense::NegativeDefinite,
                congruence: if s != 1.0 { Some(d.clone()) } else { None },
            });
        }
    }
    Ok(LmiProgram { constraints, epsilon: eps, layout: layout.clone() })
}

/// Conic standard form: one PSD cone per constraint, `G = D(±sym(E) − εI)D`,
/// vectorized with `svec` (off-diagonals scaled by √2).
pub fn compile_standard_form(program: &LmiProgram) -> Result<SdpProblem> {
    if program.constraints.is_empty() {
        return Err(invalid("empty LMI program"));
    }
    let n_vars = program.layout.total();
    let mut cones = Vec::with_capacity(program.constraints.len());
    for con in &program.constraints {
        let (rows, cols) = con.expr.shape();
        if rows != cols {
            return Err(dim(format!("constraint '{}' is not square", con.label)));
        }
        if con.expr.max_var().is_some_and(|v| v >= n_vars) {
            return Err(invalid(format!("constraint '{}' references an unknown variable", con.label)));
        }
        let n = rows;
        let sign = match con.sense {
            Sense::NegativeDefinite => -1.0,
            Sense::PositiveDefinite => 1.0,
        };
        let d: Vec<f64> = con.congruence.clone().unwrap_or_else(|| alloc::vec![1.0; n]);
        if d.len() != n {
            return Err(dim("congruence length differs from constraint size"));
        }
        let c = con.expr.constant_part();
        let mut constant = alloc::vec![0.0; n * (n + 1) / 2];
        for i in 0..n {
            for j in i..n {
                // the ε margin applies after the congruence, in scaled coordinates
                let mut v = sign * 0.5 * (c[(i, j)] + c[(j, i)]) * d[i] * d[j];
                if i == j {
                    v -= program.epsilon;
                }
                constant[svec_index(n, i, j)] = if i == j { v } else { v * core::f64::consts::SQRT_2 };
            }
        }
        let mut coeffs: Vec<(usize, usize, f64)> = con
            .expr
            .terms()
            .iter()
            .map(|t| {
                let (i, j) = if t.row <= t.col { (t.row, t.col) } else { (t.col, t.row) };
                let scale = d[i] * d[j] * sign;
                // symmetric part puts coef/2 at (i,j) and (j,i); svec scales off-diagonals by √2
                let v = if i == j { t.coef } else { t.coef * 0.5 * core::f64::consts::SQRT_2 };
                (t.var, svec_index(n, i, j), v * scale)
            })
            .collect();
        coeffs.sort_unstable_by_key(|&(v, k, _)| (v, k));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(coeffs.len());
        for (v, k, x) in coeffs {
            match merged.last_mut() {
                Some(l) if l.0 == v && l.1 == k => l.2 += x,
                _ => merged.push((v, k, x)),
            }
        }
        merged.retain(|t| t.2 != 0.0);
        cones.push(SdpCone { dim: n, constant, coeffs: merged });
    }
    Ok(SdpProblem { n_vars, cones })
}

/// Linear change of variables `y = T z` between the layout's variables `y`
/// and the variables `z` the solver sees.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableMap {
    /// `rows[k]` lists `(j, T_kj)`.
    rows: Vec<Vec<(usize, f64)>>,
}

impl VariableMap {
    pub fn identity(n: usize) -> Self {
        Self { rows: (0..n).map(|k| alloc::vec![(k, 1.0)]).collect() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|row| row.iter().map(|&(j, c)| c * z[j]).sum()).collect()
    }

    /// Rewrites every cone in terms of `z`.
    pub fn substitute(&self, problem: &SdpProblem) -> Result<SdpProblem> {
        if problem.n_vars != self.rows.len() {
            return Err(dim("variable map does not match the problem"));
        }
        let cones = problem
            .cones
            .iter()
            .map(|cone| {
                let mut coeffs: Vec<(usize, usize, f64)> = cone
                    .coeffs
                    .iter()
                    .flat_map(|&(v, k, x)| self.rows[v].iter().map(move |&(j, c)| (j, k, x * c)))
                    .collect();
                coeffs.sort_unstable_by_key(|&(v, k, _)| (v, k));
                let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(coeffs.len());
                for (v, k, x) in coeffs {
                    match merged.last_mut() {
                        Some(l) if l.0 == v && l.1 == k => l.2 += x,
                        _ => merged.push((v, k, x)),
                    }
                }
                merged.retain(|t| t.2 != 0.0);
                SdpCone { dim: cone.dim, constant: cone.constant.clone(), coeffs: merged }
            })
            .collect();
        Ok(SdpProblem { n_vars: problem.n_vars, cones })
    }
}

/// For `μ < 1` the congruence scales the `(ẋ, x)` blocks by `1/√μ`, so a
/// feasible point needs `Pᵢ − Nᵀ = O(√μ)`. Writing `N = S + √μ K` (S
/// symmetric, K skew) and `Pᵢ = S + √μ P̃ᵢ` keeps all coefficients O(1).
/// The slots of N hold S (upper triangle) and K (strict lower triangle);
/// the slots of Pᵢ hold P̃ᵢ.
pub fn small_mu_map(layout: &DecisionLayout, mu: f64) -> VariableMap {
    let mut map = VariableMap::identity(layout.total());
    if !(mu < 1.0) {
        return map;
    }
    let sm = sqrt(mu);
    let n = layout.n();
    let nx = layout.n_x();
    for a in 0..nx {
        for b in 0..nx {
            let y = n.index(a, b);
            map.rows[y] = if a == b {
                alloc::vec![(y, 1.0)]
            } else if a < b {
                alloc::vec![(y, 1.0), (n.index(b, a), -sm)]
            } else {
                alloc::vec![(n.index(b, a), 1.0), (y, sm)]
            };
        }
    }
    for i in 0..layout.r() {
        let p = layout.p(i);
        for a in 0..nx {
            for b in a..nx {
                let y = p.index(a, b);
                map.rows[y] = alloc::vec![(n.index(a, b), 1.0), (y, sm)];
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{combined_annihilator, stacked_kron};
    use crate::model::{example_system, random_delta_for, random_simplex_point};
    use crate::sdp::smat;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| g.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn rand_sys(r: usize, n_x: usize, n_u: usize, seed: u64) -> PolytopicSystem {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |a, b| Mat::from_fn(a, b, |_, _| g.random::<f64>() * 2.0 - 1.0);
        let a = (0..r).map(|_| m(n_x, n_x)).collect();
        let b = (0..r).map(|_| m(n_x, n_u)).collect();
        PolytopicSystem::new(a, b).unwrap()
    }

    #[test]
    fn layout_counts() {
        for (r, n_x, n_u) in [(2, 1, 1), (3, 2, 1), (4, 2, 1), (4, 3, 2)] {
            let lay = DecisionLayout::new(r, n_x, n_u, AnnihilatorKind::BlockDiagonal).unwrap();
            let want = r * n_x * (n_x + 1) / 2
                + r * r * n_x * n_x
                + n_x * n_x
                + r * n_u * n_x
                + 4 * n_x * r * (2 * n_x * r * (r - 1) + 2 * n_x);
            assert_eq!(lay.total(), want);
            let lay = DecisionLayout::new(r, n_x, n_u, AnnihilatorKind::Coupled).unwrap();
            assert_eq!(lay.total(), want + 4 * n_x * r * 2 * n_x * r * r);
        }
        assert!(DecisionLayout::new(1, 2, 1, AnnihilatorKind::Coupled).is_err());
    }

    #[test]
    fn layout_offsets_partition() {
        let lay = DecisionLayout::new(3, 3, 2, AnnihilatorKind::Coupled).unwrap();
        let mut seen = vec![0u8; lay.total()];
        for v in lay.vars() {
            for i in 0..v.rows {
                for j in 0..v.cols {
                    if !v.symmetric || i <= j {
                        seen[v.index(i, j)] += 1;
                    }
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        for k in [0, 5, 17, lay.total() - 1] {
            let (v, i, j) = lay.describe(k).unwrap();
            assert_eq!(v.index(i, j), k);
        }
        let p = lay.p(1);
        assert_eq!(p.index(0, 2), p.index(2, 0));
    }

    fn set(lay: &DecisionLayout, y: &mut [f64], v: &MatrixVar, m: &Mat) {
        lay.insert(v, m, y);
    }

    #[test]
    fn qhat_direct_substitution() {
        let sys = example_system(3.0).unwrap();
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let mut y = vec![0.0; lay.total()];
        set(&lay, &mut y, lay.n(), &Mat::identity(2, 2));
        set(&lay, &mut y, lay.p(1), &Mat::identity(2, 2));
        let q = build_qhat(&sys, &lay, 1.0, 1, 0).unwrap().evaluate(&y);
        let a = sys.a(1);
        assert_eq!(q.view((0, 0), (2, 2)), a + a.transpose());
        assert_eq!(q.view((2, 0), (2, 2)), *a);
        assert_eq!(q.view((2, 2), (2, 2)), Mat::identity(2, 2) * -2.0);
        let z = build_qhat(&sys, &lay, 1.0, 1, 0).unwrap().evaluate(&vec![0.0; lay.total()]);
        assert_eq!(z, Mat::zeros(4, 4));
    }

    fn qhat_oracle(sys: &PolytopicSystem, lay: &DecisionLayout, y: &[f64], mu: f64, i: usize, j: usize) -> Mat {
        let n = lay.extract(lay.n(), y);
        let x = lay.extract(lay.x(j), y);
        let p = lay.extract(lay.p(i), y);
        let nx = sys.n_x();
        let mut q = Mat::zeros(2 * nx, 2 * nx);
        for r in 0..nx {
            for c in 0..nx {
                let mut cl = 0.0;
                let mut cl_t = 0.0;
                for k in 0..nx {
                    cl += sys.a(i)[(r, k)] * n[(k, c)];
                    cl_t += sys.a(i)[(c, k)] * n[(k, r)];
                }
                for k in 0..sys.n_u() {
                    cl += sys.b(i)[(r, k)] * x[(k, c)];
                    cl_t += sys.b(i)[(c, k)] * x[(k, r)];
                }
                q[(r, c)] = cl + cl_t;
                q[(nx + r, c)] = p[(r, c)] - n[(c, r)] + mu * cl;
                q[(c, nx + r)] = q[(nx + r, c)];
                q[(nx + r, nx + c)] = -mu * (n[(r, c)] + n[(c, r)]);
            }
        }
        q
    }

    #[test]
    fn qhat_matches_entrywise_oracle() {
        let sys = example_system(1.0).unwrap();
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let y = rand_vec(lay.total(), 3);
        let q = build_qhat(&sys, &lay, 0.7, 0, 0).unwrap().evaluate(&y);
        assert!((q - qhat_oracle(&sys, &lay, &y, 0.7, 0, 0)).abs().max() < 1e-13);
    }

    #[test]
    fn psi_phi_structure_and_oracle() {
        let sys = rand_sys(3, 3, 2, 4);
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let zero = vec![0.0; lay.total()];
        let (psi, phi) = build_psi_phi(&sys, &lay, 0.3, 2, 1).unwrap();
        assert_eq!(psi.evaluate(&zero), Mat::zeros(6, 6));
        assert_eq!(phi.evaluate(&zero), Mat::zeros(6, 6));
        for seed in 0..5 {
            let y = rand_vec(lay.total(), seed);
            let ps = psi.evaluate(&y);
            let ph = phi.evaluate(&y);
            assert_eq!(ps.view((3, 3), (3, 3)).abs().max(), 0.0);
            let bx = sys.b(2) * lay.extract(lay.x(1), &y);
            let l = lay.extract(lay.l(2, 1), &y);
            for r in 0..3 {
                for c in 0..3 {
                    assert!((ps[(r, c)] - (bx[(r, c)] + bx[(c, r)] + l[(r, c)])).abs() < 1e-13);
                    assert_eq!(ps[(r, 3 + c)], 0.0);
                    assert_eq!(ps[(3 + r, c)], 0.0);
                    assert!((ph[(r, c)] - l[(r, c)]).abs() < 1e-13);
                    assert!((ph[(3 + r, c)] + 0.3 * bx[(r, c)]).abs() < 1e-13);
                    assert!((ph[(c, 3 + r)] + 0.3 * bx[(r, c)]).abs() < 1e-13);
                    assert_eq!(ph[(3 + r, 3 + c)], 0.0);
                }
            }
        }
    }

    /// ζᵀΘζ against the double sum, evaluated with explicit loops.
    pub(crate) fn quadratic_form_gap(r: usize, seed: u64) -> f64 {
        let sys = rand_sys(r, 2, 1, seed);
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let mu = 0.1 + (seed % 7) as f64;
        let th = build_theta(&sys, &lay, mu).unwrap();
        let y = rand_vec(lay.total(), seed + 1000);
        let thv = th.evaluate(&y);
        let al = random_simplex_point(r, seed + 1).unwrap();
        let da = random_delta_for(&al, seed + 2).unwrap();
        let z = Mat::from_column_slice(4, 1, &rand_vec(4, seed + 3));
        let zeta = stacked_kron(al.as_slice(), da.as_slice(), 4) * &z;
        let lhs = (zeta.transpose() * &thv * &zeta)[(0, 0)];
        let mut rhs = 0.0;
        for i in 0..r {
            for j in 0..r {
                let q = build_qhat(&sys, &lay, mu, i, j).unwrap().evaluate(&y);
                let (ps, ph) = build_psi_phi(&sys, &lay, mu, i, j).unwrap();
                let (ps, ph) = (ps.evaluate(&y), ph.evaluate(&y));
                let f = |m: &Mat| (z.transpose() * m * &z)[(0, 0)];
                let (a, d) = (al.as_slice(), da.as_slice());
                rhs += a[i] * a[j] * f(&q) - d[i] * d[j] * f(&ps) - a[i] * d[j] * f(&ph);
            }
        }
        (lhs - rhs).abs() / rhs.abs().max(1e-300)
    }

    #[test]
    fn theta_quadratic_form() {
        for r in 2..=4 {
            for seed in 0..10 {
                let e = quadratic_form_gap(r, seed);
                assert!(e <= 1e-10, "r={r} seed={seed} rel err {e}");
            }
        }
    }

    #[test]
    fn theta_symmetric_and_zero() {
        let sys = example_system(5.0).unwrap();
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let th = build_theta(&sys, &lay, 1e-3).unwrap();
        assert_eq!(th.shape(), (32, 32));
        assert_eq!(th.evaluate(&vec![0.0; lay.total()]), Mat::zeros(32, 32));
        let t = th.evaluate(&rand_vec(lay.total(), 1));
        assert!((&t - t.transpose()).abs().max() <= 1e-13);
    }

    #[test]
    fn vertex_program_shape() {
        let sys = example_system(775.0).unwrap();
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let p = build_vertex_program(&sys, &lay, 1e-11, 1e-8).unwrap();
        assert_eq!(p.constraints.len(), 28);
        assert_eq!(p.constraints.iter().filter(|c| c.expr.shape() == (2, 2)).count(), 4);
        assert_eq!(p.constraints.iter().filter(|c| c.expr.shape() == (32, 32)).count(), 24);
        for r in 2..=4 {
            let sys = rand_sys(r, 1, 1, r as u64);
            let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
            let p = build_vertex_program(&sys, &lay, 1.0, 1e-8).unwrap();
            let dq = crate::geometry::delta_vertex_count(r).unwrap();
            assert_eq!(p.constraints.len(), r + r * dq);
            let zero = vec![0.0; lay.total()];
            for c in 0..p.constraints.len() {
                let g = p.canonical(c, &zero);
                let n = g.nrows();
                assert_eq!(g, Mat::identity(n, n) * -1e-8);
            }
        }
    }

    #[test]
    fn compile_round_trip() {
        let sys = example_system(2.0).unwrap();
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let p = build_vertex_program(&sys, &lay, 2.0, 1e-8).unwrap();
        let sdp = compile_standard_form(&p).unwrap();
        assert_eq!(sdp.cones.len(), p.constraints.len());
        let y = rand_vec(lay.total(), 9);
        for (c, cone) in sdp.cones.iter().enumerate() {
            let n = cone.dim;
            let g0 = smat(n, &cone.constant);
            assert!((g0 - Mat::identity(n, n) * -1e-8).abs().max() <= 1e-14);
            let g = sdp.evaluate_cone(c, &y);
            assert!((g - p.canonical(c, &y)).abs().max() <= 1e-12);
        }
    }

    #[test]
    fn compile_applies_congruence() {
        let sys = example_system(2.0).unwrap();
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::Coupled).unwrap();
        let p = build_vertex_program(&sys, &lay, 1e-4, 1e-8).unwrap();
        let sdp = compile_standard_form(&p).unwrap();
        let y = rand_vec(lay.total(), 2);
        let c = 10;
        let d = p.constraints[c].congruence.clone().unwrap();
        let dm = Mat::from_diagonal(&nalgebra::DVector::from_vec(d));
        let mut raw = p.clone();
        raw.constraints[c].congruence = None;
        let n = dm.nrows();
        let eps = Mat::identity(n, n) * 1e-8;
        let want = &dm * (raw.canonical(c, &y) + &eps) * &dm - eps;
        assert!((sdp.evaluate_cone(c, &y) - &want).abs().max() <= 1e-9 * want.abs().max());
        assert!((p.canonical(c, &y) - want).abs().max() <= 1e-9 * p.canonical(c, &y).abs().max());
    }

    #[test]
    fn empty_program_rejected() {
        let lay = DecisionLayout::new(2, 1, 1, AnnihilatorKind::Coupled).unwrap();
        let p = LmiProgram { constraints: vec![], epsilon: 1e-8, layout: lay };
        assert!(compile_standard_form(&p).is_err());
    }

    #[test]
    fn block_diagonal_relaxation_is_structurally_infeasible() {
        // v = [0; Hℓ ⊗ (0, w)] lies in the kernel of diag(B̃ₘ, B̂ℓ) and
        // vᵀΘv = 0 for every decision vector, so no vertex LMI can be strict.
        let sys = example_system(1.0).unwrap();
        let lay = DecisionLayout::for_system(&sys, AnnihilatorKind::BlockDiagonal).unwrap();
        let th = build_theta(&sys, &lay, 1e-2).unwrap();
        let h = enumerate_delta_vertices(4).unwrap();
        for seed in 0..5 {
            let y = rand_vec(lay.total(), seed);
            for l in 0..h.dq {
                let b = combined_at_vertex(0, l, &h, 2, AnnihilatorKind::BlockDiagonal).unwrap();
                let w = Mat::from_column_slice(4, 1, &[0.0, 0.0, 0.3, -1.1]);
                let v = stacked_kron(&[0.0; 4], &h.column(l), 4) * w;
                assert!((&b * &v).abs().max() == 0.0);
                let e = vertex_constraint_expr(&th, &lay, &b).evaluate(&y);
                assert!((v.transpose() * e * &v)[(0, 0)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_dependent_annihilator_kills_kron() {
        for r in 2..=4 {
            for seed in 0..100 {
                let al = random_simplex_point(r, seed).unwrap();
                let da = random_delta_for(&al, seed + 7).unwrap();
                let a = combined_annihilator(al.as_slice(), da.as_slice(), 2, AnnihilatorKind::Coupled).unwrap();
                let z = a * stacked_kron(al.as_slice(), da.as_slice(), 4);
                assert!(z.abs().max() <= 1e-12);
            }
        }
    }
}
