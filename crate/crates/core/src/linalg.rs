//! Small dense complex linear-algebra helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

/// Dense eigen-decompositions above this size are skipped in favour of
/// pivot-based estimates.
pub(crate) const DENSE_EIGEN_LIMIT: usize = 256;

/// Pairwise (cascade) summation. The reduction tree depends only on the
/// length of the input, so results are bit-stable for a fixed input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        n if n <= 8 => values.iter().sum(),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

pub fn pairwise_sum_c(values: &[C64]) -> C64 {
    match values.len() {
        0 => ZERO,
        n if n <= 8 => values.iter().sum(),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum_c(lo) + pairwise_sum_c(hi)
        }
    }
}

/// Pairwise sum of equally shaped matrices.
pub fn pairwise_sum_m(values: &[CMatrix], rows: usize, cols: usize) -> CMatrix {
    match values.len() {
        0 => CMatrix::zeros(rows, cols),
        1 => values[0].clone(),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum_m(lo, rows, cols) + pairwise_sum_m(hi, rows, cols)
        }
    }
}

/// Symmetrize numerically: (A + A^*) / 2.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// Spectral data of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianSpectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMatrix,
}

impl HermitianSpectrum {
    pub fn of(m: &CMatrix) -> Self {
        let eig = nalgebra::SymmetricEigen::new(hermitian_part(m));
        Self {
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: eig.eigenvectors,
        }
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Ratio of extreme eigenvalues; infinite when the smallest is not positive.
    pub fn condition(&self) -> f64 {
        let (lo, hi) = (self.min(), self.max());
        if lo <= 0.0 || !lo.is_finite() {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Rebuild `V diag(phi(mu)) V^*`.
    pub fn map(&self, phi: impl Fn(f64) -> f64) -> CMatrix {
        let n = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for (j, &mu) in self.eigenvalues.iter().enumerate() {
            let s = C64::new(phi(mu), 0.0);
            for i in 0..n {
                scaled[(i, j)] *= s;
            }
        }
        &scaled * self.eigenvectors.adjoint()
    }
}

/// Inverse of a small Hermitian positive definite matrix. Returns `None`
/// when the relative condition number exceeds `ceiling`.
pub fn hermitian_inverse(m: &CMatrix, ceiling: f64) -> Option<(CMatrix, f64)> {
    if m.nrows() == 1 {
        let v = m[(0, 0)].re;
        if !(v > 0.0) || !v.is_finite() {
            return None;
        }
        return Some((CMatrix::from_element(1, 1, C64::new(1.0 / v, 0.0)), 1.0));
    }
    let spec = HermitianSpectrum::of(m);
    let cond = spec.condition();
    if !(cond <= ceiling) {
        return None;
    }
    Some((spec.map(|mu| 1.0 / mu), cond))
}

/// Principal square root of a Hermitian positive semidefinite matrix.
pub fn hermitian_sqrt(m: &CMatrix) -> CMatrix {
    if m.nrows() == 1 {
        return CMatrix::from_element(1, 1, C64::new(m[(0, 0)].re.max(0.0).sqrt(), 0.0));
    }
    HermitianSpectrum::of(m).map(|mu| mu.max(0.0).sqrt())
}

/// Lower Cholesky-like factor `L` with `L L^* = m` for PSD `m`; tolerates
/// singular inputs by going through the eigen-decomposition.
pub fn psd_factor(m: &CMatrix) -> CMatrix {
    match nalgebra::Cholesky::new(hermitian_part(m)) {
        Some(ch) => ch.l(),
        None => hermitian_sqrt(m),
    }
}

/// Solve `A x = b` for Hermitian positive definite `A`.
///
/// The smallest eigenvalue must exceed `rel_floor * trace(A) / n`; the
/// residual is refined once if it is above `1e-10 * |b|`.
pub fn solve_hpd(a: &CMatrix, b: &CVector, rel_floor: f64) -> Result<CVector> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: a.ncols(),
        });
    }
    if b.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: b.len(),
        });
    }
    let trace: f64 = (0..n).map(|i| a[(i, i)].re).sum();
    let floor = rel_floor * trace / n as f64;
    let sym = hermitian_part(a);
    if n <= DENSE_EIGEN_LIMIT {
        let spec = HermitianSpectrum::of(&sym);
        if !(spec.min() > floor) {
            return Err(Error::IllConditioned {
                condition: spec.condition(),
                reason: format!(
                    "smallest eigenvalue {:.3e} is not above {:.3e}",
                    spec.min(),
                    floor
                ),
            });
        }
    }
    let chol = nalgebra::Cholesky::new(sym).ok_or_else(|| Error::IllConditioned {
        condition: f64::INFINITY,
        reason: "Cholesky factorization failed".into(),
    })?;
    let l = chol.l();
    let pivots: Vec<f64> = (0..n).map(|i| l[(i, i)].re * l[(i, i)].re).collect();
    let pmin = pivots.iter().copied().fold(f64::INFINITY, f64::min);
    let pmax = pivots.iter().copied().fold(0.0, f64::max);
    if !(pmin > floor) {
        return Err(Error::IllConditioned {
            condition: pmax / pmin,
            reason: format!("Cholesky pivot {pmin:.3e} is not above {floor:.3e}"),
        });
    }
    let mut x = chol.solve(b);
    let bnorm = b.norm();
    let r = b - a * &x;
    if r.norm() > 1e-10 * bnorm {
        x += chol.solve(&r);
    }
    Ok(x)
}
