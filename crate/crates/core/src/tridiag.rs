//! Symmetric tridiagonal linear algebra for the lower-level quadratic.
//!
//! The lower level of every instance is built from the 1-D free-boundary
//! discrete Laplacian `A`: diagonal `(1, 2, ..., 2, 1)`, off-diagonal `-1`.
//! `A` is positive semidefinite with `||A||_2 < 4`, and its eigensystem is
//! known in closed form, which gives an implementation-independent oracle
//! for everything else in this module. The resolvent column
//! `(A + n^{-2} I)^{-1} e_n` is the object the instance scaling depends on:
//! its entries grow like `n`, are monotone along the column, and stay
//! within `(1 +- pi^2/12) n`.

use crate::{Error, Result};

/// Pivots smaller than this abort the forward sweep; the shifted Laplacian
/// systems solved here keep pivots near 1, so anything tiny means the input
/// was not positive definite.
pub const PIVOT_FLOOR: f64 = 1e-14;

/// Symmetric tridiagonal matrix stored as its diagonal and subdiagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagSym {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl TridiagSym {
    /// Build from a diagonal of length `n` and an off-diagonal of length
    /// `n - 1` (empty for `n = 1`).
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::InvalidParams(
                "tridiagonal matrix needs n >= 1".into(),
            ));
        }
        if off.len() + 1 != diag.len() {
            return Err(Error::DimensionMismatch {
                what: "tridiagonal off-diagonal",
                expected: diag.len() - 1,
                got: off.len(),
            });
        }
        Ok(Self { diag, off })
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn off(&self) -> &[f64] {
        &self.off
    }

    /// `(M + shift I) z`.
    pub fn shifted_matvec(&self, shift: f64, z: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        if z.len() != n {
            return Err(Error::DimensionMismatch {
                what: "matvec operand",
                expected: n,
                got: z.len(),
            });
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = (self.diag[i] + shift) * z[i];
            if i > 0 {
                acc += self.off[i - 1] * z[i - 1];
            }
            if i + 1 < n {
                acc += self.off[i] * z[i + 1];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// `z' (M + shift I) z`.
    pub fn shifted_quadratic_form(&self, shift: f64, z: &[f64]) -> Result<f64> {
        let n = self.n();
        if z.len() != n {
            return Err(Error::DimensionMismatch {
                what: "quadratic form operand",
                expected: n,
                got: z.len(),
            });
        }
        let mut acc = 0.0;
        for i in 0..n {
            acc += (self.diag[i] + shift) * z[i] * z[i];
        }
        for i in 0..n - 1 {
            acc += 2.0 * self.off[i] * z[i] * z[i + 1];
        }
        Ok(acc)
    }
}

/// The free-boundary discrete Laplacian: diagonal `(1, 2, ..., 2, 1)`,
/// off-diagonal `-1`. For `n = 1` it is the 1x1 zero matrix.
pub fn build_laplacian(n: usize) -> TridiagSym {
    assert!(n >= 1, "laplacian needs n >= 1");
    let diag = if n == 1 {
        vec![0.0]
    } else {
        let mut d = vec![2.0; n];
        d[0] = 1.0;
        d[n - 1] = 1.0;
        d
    };
    let off = vec![-1.0; n - 1];
    TridiagSym { diag, off }
}

/// Solve `(M + shift I) v = b` by the Thomas algorithm (no pivoting;
/// intended for the strictly positive definite shifted Laplacian).
pub fn thomas_solve(m: &TridiagSym, shift: f64, b: &[f64]) -> Result<Vec<f64>> {
    let n = m.n();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            what: "thomas_solve right-hand side",
            expected: n,
            got: b.len(),
        });
    }
    // Forward sweep on a scratch copy of the diagonal.
    let mut d = vec![0.0; n];
    let mut rhs = b.to_vec();
    d[0] = m.diag[0] + shift;
    if d[0].abs() < PIVOT_FLOOR {
        return Err(Error::SingularSystem {
            index: 0,
            pivot: d[0],
        });
    }
    for i in 1..n {
        let w = m.off[i - 1] / d[i - 1];
        d[i] = m.diag[i] + shift - w * m.off[i - 1];
        rhs[i] -= w * rhs[i - 1];
        if d[i].abs() < PIVOT_FLOOR {
            return Err(Error::SingularSystem {
                index: i,
                pivot: d[i],
            });
        }
    }
    // Back substitution.
    let mut v = vec![0.0; n];
    v[n - 1] = rhs[n - 1] / d[n - 1];
    for i in (0..n - 1).rev() {
        v[i] = (rhs[i] - m.off[i] * v[i + 1]) / d[i];
    }
    Ok(v)
}

/// Closed-form eigensystem of the free-boundary Laplacian of size `n`.
///
/// Eigenvalues (ascending, 0-based `k`): `mu_k = 2 (1 - cos(k pi / n))`,
/// so `mu_0 = 0 < mu_1 < ... < mu_{n-1} < 4`. Eigenvectors form the
/// discrete cosine basis (DCT-II):
/// `q_0(j) = 1/sqrt(n)` and `q_k(j) = sqrt(2/n) cos(k (j + 1/2) pi / n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    n: usize,
    eigenvalues: Vec<f64>,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Ascending eigenvalues of the Laplacian.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Entry `j` of the `k`-th orthonormal eigenvector (both 0-based).
    pub fn eigenvector_entry(&self, k: usize, j: usize) -> f64 {
        let n = self.n as f64;
        if k == 0 {
            1.0 / n.sqrt()
        } else {
            (2.0 / n).sqrt() * ((k as f64) * (j as f64 + 0.5) * std::f64::consts::PI / n).cos()
        }
    }

    /// Entry `(i, j)` of `(A + shift I)^{-1}` via the eigen-expansion
    /// `sum_k q_k(i) q_k(j) / (mu_k + shift)`. This is the slow, formula-
    /// driven path used to cross-check the Thomas solver.
    pub fn resolvent_entry(&self, shift: f64, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.n {
            acc += self.eigenvector_entry(k, i) * self.eigenvector_entry(k, j)
                / (self.eigenvalues[k] + shift);
        }
        acc
    }
}

/// Build the closed-form eigensystem for size `n`.
pub fn spectral_basis(n: usize) -> SpectralBasis {
    assert!(n >= 1, "spectral basis needs n >= 1");
    let eigenvalues = (0..n)
        .map(|k| 2.0 * (1.0 - ((k as f64) * std::f64::consts::PI / (n as f64)).cos()))
        .collect();
    SpectralBasis { n, eigenvalues }
}

/// Last column of the resolvent `S = (A + n^{-2} I)^{-1}`, i.e.
/// `v = S e_n`, with `v[0] = S_{1,n}` and `v[n-1] = S_{n,n}`.
///
/// The entries are positive, nondecreasing along the column, and pinned to
/// the window `(1 - pi^2/12) n <= v[i] <= (1 + pi^2/12) n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolventColumn {
    n: usize,
    values: Vec<f64>,
}

impl ResolventColumn {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `S_{1,n}`, the far corner entry.
    pub fn first(&self) -> f64 {
        self.values[0]
    }

    /// `S_{n,n}`, the near corner entry.
    pub fn last(&self) -> f64 {
        self.values[self.n - 1]
    }
}

/// Solve `(A + n^{-2} I) v = e_n` for the size-`n` Laplacian.
pub fn resolvent_last_column(n: usize) -> Result<ResolventColumn> {
    if n < 1 {
        return Err(Error::InvalidParams("resolvent column needs n >= 1".into()));
    }
    let a = build_laplacian(n);
    let shift = 1.0 / (n as f64 * n as f64);
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    let values = thomas_solve(&a, shift, &b)?;
    Ok(ResolventColumn { n, values })
}
