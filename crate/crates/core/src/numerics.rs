//! Dense complex linear algebra used by the model and the coefficient builders.
//!
//! Matrices and vectors are plain `nalgebra` containers over `Complex64`. The
//! operators here are the handful the MSE decompositions are written in:
//! Kronecker and Hadamard products, column-stacking `vec`, the diagonal
//! extractor `dtilde`, and a Cholesky solve for Hermitian positive-definite
//! systems.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;
pub type RMatrix = DMatrix<f64>;
pub type RVector = DVector<f64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Relative tolerance for the Hermitian precondition of [`hermitian_solve`].
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Cholesky pivots below this fraction of the trace are treated as singular.
pub const PIVOT_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is not Hermitian (max asymmetry {asymmetry:.3e}, scale {scale:.3e})")]
    NotHermitian { asymmetry: f64, scale: f64 },
    #[error("matrix is numerically singular (pivot {pivot:.3e} at index {index})")]
    Singular { index: usize, pivot: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Solves `H x = b` for Hermitian positive-definite `H`.
///
/// The input is symmetrized as `(H + Hᴴ)/2` before factorizing, which removes
/// the rounding-level asymmetry every product of the form `A Ω Aᴴ` picks up.
pub fn hermitian_solve(h: &CMatrix, b: &CVector) -> Result<CVector, NumericsError> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(NumericsError::Shape(format!(
            "expected square matrix, got {}x{}",
            n,
            h.ncols()
        )));
    }
    if b.len() != n {
        return Err(NumericsError::Shape(format!(
            "right-hand side has length {}, matrix is {}x{}",
            b.len(),
            n,
            n
        )));
    }
    let scale = h.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    let asymmetry = max_asymmetry(h);
    if asymmetry > HERMITIAN_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(NumericsError::NotHermitian { asymmetry, scale });
    }
    let sym = (h + h.adjoint()).scale(0.5);
    let trace: f64 = (0..n).map(|i| sym[(i, i)].re).sum();
    let floor = PIVOT_TOL * trace.abs();
    let chol = sym.cholesky().ok_or(NumericsError::NotPositiveDefinite)?;
    let l = chol.l_dirty();
    for j in 0..n {
        let pivot = l[(j, j)].re * l[(j, j)].re;
        if !(pivot > floor) || !pivot.is_finite() {
            return Err(NumericsError::Singular { index: j, pivot });
        }
    }
    Ok(chol.solve(b))
}

/// Largest entrywise deviation `|H - Hᴴ|` of a square matrix.
pub fn max_asymmetry(h: &CMatrix) -> f64 {
    let n = h.nrows().min(h.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((h[(i, j)] - h[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Kronecker product: block `(i, j)` of the result is `A[i, j] · B`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    let mut out = CMatrix::zeros(p * r, q * s);
    for i in 0..p {
        for j in 0..q {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            for k in 0..r {
                for l in 0..s {
                    out[(i * r + k, j * s + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Entrywise (Hadamard) product.
pub fn hadamard(a: &CMatrix, b: &CMatrix) -> Result<CMatrix, NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::Shape(format!(
            "hadamard of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.component_mul(b))
}

/// Keeps the diagonal of a square matrix and zeroes everything else.
pub fn dtilde(a: &CMatrix) -> Result<CMatrix, NumericsError> {
    if a.nrows() != a.ncols() {
        return Err(NumericsError::Shape(format!(
            "dtilde needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(CMatrix::from_diagonal(&a.diagonal()))
}

/// Column-stacking vectorization.
pub fn vec(a: &CMatrix) -> CVector {
    // nalgebra storage is column-major, so the raw slice is already vec(A).
    CVector::from_column_slice(a.as_slice())
}

/// `diag(v)` for a real vector, as a complex matrix.
pub fn real_diag(v: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(
        v.len(),
        v.iter().map(|&x| Complex64::new(x, 0.0)),
    ))
}

pub fn to_complex(m: &RMatrix) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// `xᴴ A x`, real part. Exact for Hermitian `A`.
pub fn quad_form(a: &CMatrix, x: &CVector) -> f64 {
    x.dotc(&(a * x)).re
}

/// `xᵀ Re{A} x` for a real vector `x`.
pub fn real_quad_form(a: &CMatrix, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        if x[j] == 0.0 {
            continue;
        }
        let mut col = 0.0;
        for i in 0..n {
            col += a[(i, j)].re * x[i];
        }
        acc += col * x[j];
    }
    acc
}

/// Relative error `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    fn random_hpd(n: usize, rng: &mut impl Rng) -> CMatrix {
        let a = random_matrix(n, n, rng);
        &a * a.adjoint() + CMatrix::identity(n, n).scale(0.1)
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let x = hermitian_solve(
            &CMatrix::identity(2, 2),
            &CVector::from_vec(vec![ONE, c(0.0, 1.0)]),
        )
        .unwrap();
        assert_eq!(x[0], ONE);
        assert_eq!(x[1], c(0.0, 1.0));

        let h = real_diag(&[2.0, 4.0]);
        let x = hermitian_solve(&h, &CVector::from_vec(vec![c(2.0, 0.0), c(4.0, 0.0)])).unwrap();
        assert!((x[0] - ONE).norm() < 1e-15 && (x[1] - ONE).norm() < 1e-15);
    }

    #[test]
    fn solve_residual_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[8usize, 17, 64] {
            let h = random_hpd(n, &mut rng);
            let b = random_matrix(n, 1, &mut rng).column(0).into_owned();
            let x = hermitian_solve(&h, &b).unwrap();
            let res = (&h * &x - &b).norm() / b.norm();
            let bound = if n == 8 { 1e-10 } else { 1e-8 };
            assert!(res <= bound, "n={n} residual {res}");
        }
    }

    #[test]
    fn solve_rejects_non_hermitian_and_singular() {
        let mut h = CMatrix::identity(2, 2);
        h[(0, 1)] = c(0.5, 0.0);
        assert!(matches!(
            hermitian_solve(&h, &CVector::from_element(2, ONE)),
            Err(NumericsError::NotHermitian { .. })
        ));
        let h = CMatrix::from_element(2, 2, ONE);
        assert!(matches!(
            hermitian_solve(&h, &CVector::from_element(2, ONE)),
            Err(NumericsError::Singular { .. } | NumericsError::NotPositiveDefinite)
        ));
        assert!(matches!(
            hermitian_solve(&CMatrix::identity(2, 2), &CVector::from_element(3, ONE)),
            Err(NumericsError::Shape(_))
        ));
    }

    #[test]
    fn solve_tolerates_rounding_asymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h = random_hpd(6, &mut rng);
        h[(0, 3)] += c(1e-14, -1e-14);
        let b = CVector::from_element(6, ONE);
        let x = hermitian_solve(&h, &b).unwrap();
        let sym = (&h + h.adjoint()).scale(0.5);
        assert!((&sym * &x - &b).norm() <= 1e-10 * b.norm());
    }

    #[test]
    fn kron_small_cases() {
        let i2 = CMatrix::identity(2, 2);
        assert_eq!(kron(&i2, &i2), CMatrix::identity(4, 4));
        let swap = CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]);
        let two = CMatrix::from_element(1, 1, c(2.0, 0.0));
        let expect = CMatrix::from_row_slice(2, 2, &[ZERO, c(2.0, 0.0), c(2.0, 0.0), ZERO]);
        assert_eq!(kron(&swap, &two), expect);
    }

    #[test]
    fn kron_matches_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(3, 2, &mut rng);
        let b = random_matrix(2, 2, &mut rng);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (6, 4));
        for r in 0..6 {
            for s in 0..4 {
                let expect = a[(r / 2, s / 2)] * b[(r % 2, s % 2)];
                assert_eq!(k[(r, s)], expect);
            }
        }
    }

    #[test]
    fn hadamard_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(3, 4, &mut rng);
        assert_eq!(hadamard(&a, &CMatrix::from_element(3, 4, ONE)).unwrap(), a);
        assert_eq!(
            hadamard(&a, &CMatrix::zeros(3, 4)).unwrap(),
            CMatrix::zeros(3, 4)
        );
        let b = random_matrix(3, 4, &mut rng);
        let h = hadamard(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(h[(i, j)], a[(i, j)] * b[(i, j)]);
            }
        }
        assert!(hadamard(&a, &CMatrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn dtilde_cases() {
        assert_eq!(
            dtilde(&CMatrix::identity(3, 3)).unwrap(),
            CMatrix::identity(3, 3)
        );
        let a =
            CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)]);
        let d = dtilde(&a).unwrap();
        assert_eq!(
            d,
            CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), ZERO, ZERO, c(4.0, 0.0)])
        );
        assert_eq!(dtilde(&d).unwrap(), d);
        assert!(dtilde(&CMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn dtilde_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(4, 4, &mut rng);
        let b = random_matrix(4, 4, &mut rng);
        let alpha = c(0.3, -1.2);
        let lhs = dtilde(&(a.scale(1.0) * alpha + &b)).unwrap();
        let rhs = dtilde(&a).unwrap() * alpha + dtilde(&b).unwrap();
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn vec_stacks_columns() {
        let col = CMatrix::from_row_slice(2, 1, &[c(1.0, 0.0), c(2.0, 0.0)]);
        assert_eq!(vec(&col).as_slice(), &[c(1.0, 0.0), c(2.0, 0.0)]);
        let a =
            CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(3.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)]);
        let v = vec(&a);
        let re: Vec<f64> = v.iter().map(|z| z.re).collect();
        assert_eq!(re, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn trace_identity_with_kron_and_vec() {
        // Tr(ABCD) = vec(Dᵀ)ᵀ (Cᵀ ⊗ A) vec(B)
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let a = random_matrix(3, 3, &mut rng);
            let b = random_matrix(3, 3, &mut rng);
            let cm = random_matrix(3, 3, &mut rng);
            let d = random_matrix(3, 3, &mut rng);
            let lhs = (&a * &b * &cm * &d).trace();
            let rhs =
                (vec(&d.transpose()).transpose() * kron(&cm.transpose(), &a) * vec(&b))[(0, 0)];
            assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1.0));
        }
    }

    #[test]
    fn trace_identity_with_hadamard() {
        // Tr(A diag(b) C diag(b)ᴴ) = bᴴ (Cᵀ ⊙ A) b
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let a = random_matrix(4, 4, &mut rng);
            let cm = random_matrix(4, 4, &mut rng);
            let b = random_matrix(4, 1, &mut rng).column(0).into_owned();
            let db = CMatrix::from_diagonal(&b);
            let lhs = (&a * &db * &cm * db.adjoint()).trace();
            let rhs = b.dotc(&(hadamard(&cm.transpose(), &a).unwrap() * &b));
            assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1.0));
        }
    }
}
