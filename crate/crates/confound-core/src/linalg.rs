//! Dense symmetric linear algebra sized for covariance matrices up to a few
//! tens of thousands of rows: a blocked right-looking Cholesky whose trailing
//! updates run through `matrixmultiply::dgemm`, triangular solves, and the
//! batched lower-triangular product used to turn standard normal draws into
//! field samples.
//!
//! Everything is row-major `Vec<f64>`. The factorization reads only the
//! lower triangle, so callers may leave symmetric duplicates in the upper
//! triangle; the finished factor has its strict upper triangle zeroed so it
//! can be fed to a plain matrix product.

use crate::error::{Error, Result};
use crate::par::for_each_chunk_mut;

/// Panel width for the blocked factorization. Large enough that the
/// O(n^2 * NB) scalar substitution work is dwarfed by the O(n^3) matrix
/// products, small enough to keep panels cache-resident.
const NB: usize = 192;

/// C := alpha * A B + beta * C with all matrices row-major contiguous.
/// A is m x k, B is k x n, C is m x n.
pub fn matmul_rm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unblocked Cholesky of a small row-major block, in place.
fn chol_unblocked(d: &mut [f64], nb: usize) -> Result<()> {
    for j in 0..nb {
        let mut s = d[j * nb + j];
        for t in 0..j {
            s -= d[j * nb + t] * d[j * nb + t];
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let ljj = s.sqrt();
        d[j * nb + j] = ljj;
        for i in (j + 1)..nb {
            let mut s = d[i * nb + j];
            for t in 0..j {
                s -= d[i * nb + t] * d[j * nb + t];
            }
            d[i * nb + j] = s / ljj;
        }
    }
    Ok(())
}

/// In-place Cholesky A = L L^T of a symmetric positive definite matrix.
///
/// Right-looking and blocked: factor the diagonal block, triangular-solve
/// the panel below it, then subtract the panel's outer product from the
/// trailing matrix one row-block at a time via `dgemm`. The row-block loop
/// is data-parallel (disjoint row ranges); the panel is copied to a private
/// buffer first so parallel tasks only share immutable reads.
///
/// On success the lower triangle holds L and the strict upper triangle is
/// zeroed. Fails with `NotPositiveDefinite` when a pivot is not strictly
/// positive.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    let mut diag = vec![0.0f64; NB * NB];
    let mut panel: Vec<f64> = Vec::new();

    let mut k0 = 0;
    while k0 < n {
        let nb = NB.min(n - k0);
        let k1 = k0 + nb;

        // Factor the diagonal block in a contiguous scratch copy.
        for i in 0..nb {
            diag[i * nb..i * nb + nb]
                .copy_from_slice(&a[(k0 + i) * n + k0..(k0 + i) * n + k1]);
        }
        chol_unblocked(&mut diag[..nb * nb], nb)?;
        for i in 0..nb {
            a[(k0 + i) * n + k0..(k0 + i) * n + k1]
                .copy_from_slice(&diag[i * nb..i * nb + nb]);
        }

        if k1 == n {
            break;
        }

        // Panel solve: each row r >= k1 gets a[r, k0..k1] := that row times
        // L11^{-T}, i.e. forward substitution against the diagonal factor.
        // Rows are independent.
        let l11 = &diag[..nb * nb];
        for_each_chunk_mut(&mut a[k1 * n..n * n], n, |_, row| {
            for j in 0..nb {
                let mut s = row[k0 + j];
                for t in 0..j {
                    s -= row[k0 + t] * l11[j * nb + t];
                }
                row[k0 + j] = s / l11[j * nb + j];
            }
        });

        // Copy the solved panel out so trailing updates can read it while
        // row-blocks of the trailing matrix are mutated in parallel.
        let prows = n - k1;
        panel.clear();
        panel.reserve(prows * nb);
        for r in 0..prows {
            panel.extend_from_slice(&a[(k1 + r) * n + k0..(k1 + r) * n + k1]);
        }
        let panel_ref = &panel;

        // Trailing update: for the row block holding global rows i0..i1,
        // subtract P[i0..i1] * P[k1..i1]^T from columns k1..i1. Columns past
        // the block's own diagonal square are never read again, so the
        // rectangle (rather than trapezoid) of writes is harmless.
        for_each_chunk_mut(&mut a[k1 * n..n * n], NB * n, |bi, rows| {
            let i0 = k1 + bi * NB;
            let m = rows.len() / n;
            let i1 = i0 + m;
            let ncols = i1 - k1;
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    nb,
                    ncols,
                    -1.0,
                    panel_ref.as_ptr().add((i0 - k1) * nb),
                    nb as isize,
                    1,
                    panel_ref.as_ptr(),
                    1,
                    nb as isize,
                    1.0,
                    rows.as_mut_ptr().add(k1),
                    n as isize,
                    1,
                );
            }
        });

        k0 = k1;
    }

    // Zero the strict upper triangle so the factor is a genuine lower
    // triangular matrix usable in full matrix products.
    for i in 0..n {
        for v in &mut a[i * n + i + 1..(i + 1) * n] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// A finished Cholesky factor L with A = L L^T.
pub struct CholFactor {
    pub n: usize,
    /// Row-major n x n, lower triangular (strict upper triangle is zero).
    pub l: Vec<f64>,
}

/// Factor a symmetric positive definite matrix, consuming its storage.
pub fn factor_spd(mut a: Vec<f64>, n: usize) -> Result<CholFactor> {
    cholesky_in_place(&mut a, n)?;
    Ok(CholFactor { n, l: a })
}

impl CholFactor {
    /// log det A = 2 * sum_i log L_ii.
    pub fn logdet(&self) -> f64 {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>() * 2.0
    }

    /// Solve L y = b in place.
    pub fn forward_solve(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for i in 0..n {
            let s = dot(&self.l[i * n..i * n + i], &b[..i]);
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
    }

    /// Solve L^T x = b in place.
    pub fn backward_solve(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in (i + 1)..n {
                s -= self.l[j * n + i] * b[j];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solve A x = b in place (forward then backward).
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.forward_solve(b);
        self.backward_solve(b);
    }

    /// out := L * z where z is row-major n x ncols. One matrix product, so
    /// a whole batch of standard normal draws becomes correlated samples in
    /// a single call.
    pub fn sample_mul(&self, z: &[f64], ncols: usize, out: &mut [f64]) {
        matmul_rm(self.n, self.n, ncols, 1.0, &self.l, z, 0.0, out);
    }
}
