//! Dense helpers shared by the other modules.
//!
//! Small matrices go through `nalgebra`; the interior-point Schur system is a
//! large dense SPD matrix factored by a blocked Cholesky in row-major storage.

use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

pub type Mat = DMatrix<f64>;

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// `He(M) = M + Mᵀ`.
pub fn he(m: &Mat) -> Mat {
    m + m.transpose()
}

pub fn sym_part(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(invalid("eigenvalues of a non-square matrix"));
    }
    if !all_finite(m) {
        return Err(Error::NonFinite("symmetric eigenvalue input"));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut ev: Vec<f64> = sym_part(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Smallest eigenvalue of `(M + Mᵀ)/2`.
pub fn min_eigenvalue(m: &Mat) -> Result<f64> {
    let ev = sym_eigenvalues(m)?;
    ev.first().copied().ok_or_else(|| invalid("empty matrix"))
}

/// Largest eigenvalue of `(M + Mᵀ)/2`.
pub fn max_eigenvalue(m: &Mat) -> Result<f64> {
    let ev = sym_eigenvalues(m)?;
    ev.last().copied().ok_or_else(|| invalid("empty matrix"))
}

/// Largest real part among the eigenvalues of a general square matrix.
pub fn spectral_abscissa(m: &Mat) -> Result<f64> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(invalid("spectral abscissa needs a non-empty square matrix"));
    }
    if !all_finite(m) {
        return Err(Error::NonFinite("spectral abscissa input"));
    }
    let ev = m.complex_eigenvalues();
    Ok(ev.iter().fold(f64::NEG_INFINITY, |a, z| a.max(z.re)))
}

/// Kronecker product.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// 2-norm condition number from singular values; `inf` when singular.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().singular_values();
    let hi = sv.iter().fold(0.0f64, |a, &v| a.max(v));
    let lo = sv.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

const NB: usize = 96;

/// In-place Cholesky `A = L Lᵀ` of a row-major `n×n` SPD matrix; only the
/// lower triangle is read and overwritten. Returns the failing pivot on error.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> core::result::Result<(), usize> {
    debug_assert_eq!(a.len(), n * n);
    let mut k = 0;
    while k < n {
        let kb = NB.min(n - k);
        for j in k..k + kb {
            let rj = j * n;
            let mut d = a[rj + j];
            for p in k..j {
                d -= a[rj + p] * a[rj + p];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let d = sqrt(d);
            a[rj + j] = d;
            let inv = 1.0 / d;
            let (head, tail) = a.split_at_mut((j + 1) * n);
            let lj = &head[rj + k..rj + j];
            for i in 0..n - j - 1 {
                let row = &mut tail[i * n..i * n + j + 1];
                let mut s = row[j];
                for (x, y) in row[k..j].iter().zip(lj) {
                    s -= x * y;
                }
                row[j] = s * inv;
            }
        }
        // trailing update, block column by block column (lower part only)
        let mut j = k + kb;
        while j < n {
            let jb = NB.min(n - j);
            // SAFETY: the read panel (columns k..k+kb) and the written block
            // (columns j..j+jb, j ≥ k+kb) do not overlap; all offsets are in range.
            unsafe {
                let p = a.as_mut_ptr();
                matrixmultiply::dgemm(
                    n - j,
                    kb,
                    jb,
                    -1.0,
                    p.add(j * n + k),
                    n as isize,
                    1,
                    p.add(j * n + k),
                    1,
                    n as isize,
                    1.0,
                    p.add(j * n + j),
                    n as isize,
                    1,
                );
            }
            j += jb;
        }
        k += kb;
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` in place using the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&b[..i]).map(|(x, y)| x * y).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let bi = b[i] / l[i * n + i];
        b[i] = bi;
        for (p, bp) in b[..i].iter_mut().enumerate() {
            *bp -= l[i * n + p] * bi;
        }
    }
}
