//! Extreme points of the mismatch polytope and the structural annihilators.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::linalg::Mat;

/// Vertex count of the Δα polytope: `r!/((r/2)!)²` for even r,
/// `r!/(((r−1)/2)!)²` for odd r.
pub fn delta_vertex_count(r: usize) -> Result<usize> {
    if r < 2 {
        return Err(invalid(format!("the mismatch polytope is degenerate for r = {r}")));
    }
    let h = r / 2; // (r-1)/2 for odd r
    // r!/(h!)² = C(r, h) · (r−h)!/h!
    let mut c: u128 = 1;
    for i in 0..h {
        c = c * (r - i) as u128 / (i + 1) as u128;
    }
    for i in (h + 1)..=(r - h) {
        c *= i as u128;
    }
    usize::try_from(c).map_err(|_| invalid("vertex count overflows usize"))
}

/// Columns of `h` are the vertices of `{d : Σd = 0, −1 ≤ dᵢ ≤ 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVertexSet {
    pub r: usize,
    pub dq: usize,
    pub h: Mat,
}

impl DeltaVertexSet {
    pub fn column(&self, l: usize) -> Vec<f64> {
        self.h.column(l).iter().copied().collect()
    }
}

/// All sum-zero sign patterns (one zero when r is odd), ordered
/// lexicographically with `+1 ≻ 0 ≻ −1`.
pub fn enumerate_delta_vertices(r: usize) -> Result<DeltaVertexSet> {
    let dq = delta_vertex_count(r)?;
    let zeros = r % 2;
    let mut cols: Vec<Vec<i8>> = Vec::with_capacity(dq);
    let mut cur = Vec::with_capacity(r);
    fn rec(r: usize, zeros: usize, cur: &mut Vec<i8>, sum: i32, nz: usize, out: &mut Vec<Vec<i8>>) {
        let left = r - cur.len();
        if left == 0 {
            if sum == 0 && nz == zeros {
                out.push(cur.clone());
            }
            return;
        }
        if (sum.unsigned_abs() as usize) > left {
            return;
        }
        for v in [1i8, 0, -1] {
            if v == 0 && nz == zeros {
                continue;
            }
            cur.push(v);
            rec(r, zeros, cur, sum + v as i32, nz + usize::from(v == 0), out);
            cur.pop();
        }
    }
    rec(r, zeros, &mut cur, 0, 0, &mut cols);
    debug_assert_eq!(cols.len(), dq);
    let h = Mat::from_fn(r, cols.len(), |i, j| cols[j][i] as f64);
    Ok(DeltaVertexSet { r, dq: cols.len(), h })
}

/// One block row per pair `i < j`: `θⱼ·I_b` in block column i, `−θᵢ·I_b` in
/// block column j. Annihilates `θ ⊗ I_b`.
pub fn pair_annihilator(theta: &[f64], b: usize) -> Mat {
    let r = theta.len();
    let rows = r * r.saturating_sub(1) / 2;
    let mut m = Mat::zeros(rows * b, r * b);
    let mut row = 0;
    for i in 0..r {
        for j in i + 1..r {
            for d in 0..b {
                m[(row * b + d, i * b + d)] = theta[j];
                m[(row * b + d, j * b + d)] = -theta[i];
            }
            row += 1;
        }
    }
    m
}

/// `[I_b … I_b]`: annihilates `d ⊗ I_b` for every sum-zero `d`.
pub fn sum_zero_block_row(r: usize, b: usize) -> Mat {
    Mat::from_fn(b, r * b, |i, j| if j % b == i { 1.0 } else { 0.0 })
}

/// Pair rows between the α entries and the Δα entries of `(α, Δα)`:
/// `Δαⱼ·I_b` at α-block i and `−αᵢ·I_b` at Δα-block j, for all i, j.
pub fn cross_annihilator(alpha: &[f64], delta: &[f64], b: usize) -> Mat {
    let r = alpha.len();
    let mut m = Mat::zeros(r * r * b, 2 * r * b);
    for i in 0..r {
        for j in 0..r {
            let row = i * r + j;
            for d in 0..b {
                m[(row * b + d, i * b + d)] = delta[j];
                m[(row * b + d, (r + j) * b + d)] = -alpha[i];
            }
        }
    }
    m
}

/// Which multiplier structure relaxes the lifted inequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnnihilatorKind {
    /// `diag(B̃(α), B̂(Δα))` alone. Leaves α and Δα parts independent, which
    /// makes the strict vertex LMIs unsolvable (the ẋẋ block of Ψ is zero).
    BlockDiagonal,
    /// The block-diagonal rows plus the α–Δα cross rows.
    #[default]
    Coupled,
}

/// Number of rows of the combined annihilator (= columns of 𝒩).
pub fn annihilator_rows(r: usize, n_x: usize, kind: AnnihilatorKind) -> usize {
    let b = 2 * n_x;
    let base = b * r * (r - 1) + b;
    match kind {
        AnnihilatorKind::BlockDiagonal => base,
        AnnihilatorKind::Coupled => base + b * r * r,
    }
}

/// Combined annihilator at an arbitrary `(α, Δα)`; block size `b = 2n_x`.
/// Annihilates `[α ⊗ I_b; Δα ⊗ I_b]` whenever `ΣΔα = 0`.
pub fn combined_annihilator(alpha: &[f64], delta: &[f64], n_x: usize, kind: AnnihilatorKind) -> Result<Mat> {
    let r = alpha.len();
    if delta.len() != r || r < 2 {
        return Err(invalid("combined annihilator needs α and Δα of equal length r ≥ 2"));
    }
    let b = 2 * n_x;
    let bt = pair_annihilator(alpha, b);
    let bh_pair = pair_annihilator(delta, b);
    let sz = sum_zero_block_row(r, b);
    let rows = annihilator_rows(r, n_x, kind);
    let mut m = Mat::zeros(rows, 2 * r * b);
    let h = r * b;
    m.view_mut((0, 0), bt.shape()).copy_from(&bt);
    let mut row = bt.nrows();
    m.view_mut((row, h), bh_pair.shape()).copy_from(&bh_pair);
    row += bh_pair.nrows();
    m.view_mut((row, h), sz.shape()).copy_from(&sz);
    row += sz.nrows();
    if kind == AnnihilatorKind::Coupled {
        let c = cross_annihilator(alpha, delta, b);
        m.view_mut((row, 0), c.shape()).copy_from(&c);
    }
    Ok(m)
}

/// Combined annihilator at simplex vertex `m` and Δα vertex `l` (0-based).
pub fn combined_at_vertex(
    m: usize,
    l: usize,
    h: &DeltaVertexSet,
    n_x: usize,
    kind: AnnihilatorKind,
) -> Result<Mat> {
    if m >= h.r || l >= h.dq {
        return Err(invalid(format!("vertex index ({m}, {l}) out of range ({}, {})", h.r, h.dq)));
    }
    let mut e = alloc::vec![0.0; h.r];
    e[m] = 1.0;
    combined_annihilator(&e, &h.column(l), n_x, kind)
}

/// `θ ⊗ I_b`.
pub fn kron_identity(theta: &[f64], b: usize) -> Mat {
    Mat::from_fn(theta.len() * b, b, |i, j| if i % b == j { theta[i / b] } else { 0.0 })
}

/// `[θ ⊗ I_b; δ ⊗ I_b]`.
pub fn stacked_kron(alpha: &[f64], delta: &[f64], b: usize) -> Mat {
    let r = alpha.len();
    Mat::from_fn(2 * r * b, b, |i, j| {
        let blk = i / b;
        if i % b != j {
            0.0
        } else if blk < r {
            alpha[blk]
        } else {
            delta[blk - r]
        }
    })
}
