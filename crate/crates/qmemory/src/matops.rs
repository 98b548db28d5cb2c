//! Dense matrix operations shared by the model builders and criteria
//! evaluators: matrix exponentials, algebraic Lyapunov solves, spectral
//! abscissas and Frobenius pairings.
//!
//! Everything is sized for the desk scale the crate targets (dimensions in
//! the tens), so dense O(n^3) algorithms are used throughout and the
//! Lyapunov equation is solved by Kronecker vectorization.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Dense real matrix, column-major.
pub type RealMatrix = DMatrix<f64>;
/// Dense complex matrix, column-major.
pub type ComplexMatrix = DMatrix<Complex64>;

#[derive(Debug, Error)]
pub enum MatOpsError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix must be non-empty")]
    Empty,
    #[error("Lyapunov coefficient matrix is not Hurwitz (spectral abscissa {abscissa:.3e} >= 0)")]
    NotHurwitz { abscissa: f64 },
    #[error("linear solve failed while {context}")]
    SolveFailed { context: &'static str },
}

/// Builds a real matrix from nested rows, rejecting ragged or non-finite input.
pub fn try_real_matrix(rows: &[Vec<f64>]) -> Result<RealMatrix, MatOpsError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(MatOpsError::Empty);
    }
    let ncols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(MatOpsError::DimensionMismatch {
                context: format!("row {i} has {} entries, expected {ncols}", r.len()),
            });
        }
        for (j, &x) in r.iter().enumerate() {
            if !x.is_finite() {
                return Err(MatOpsError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(RealMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Builds a complex matrix from nested rows of `(re, im)` pairs.
pub fn try_complex_matrix(rows: &[Vec<(f64, f64)>]) -> Result<ComplexMatrix, MatOpsError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(MatOpsError::Empty);
    }
    let ncols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(MatOpsError::DimensionMismatch {
                context: format!("row {i} has {} entries, expected {ncols}", r.len()),
            });
        }
        for (j, &(re, im)) in r.iter().enumerate() {
            if !re.is_finite() || !im.is_finite() {
                return Err(MatOpsError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(ComplexMatrix::from_fn(rows.len(), ncols, |i, j| {
        Complex64::new(rows[i][j].0, rows[i][j].1)
    }))
}

fn check_square<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> Result<(), MatOpsError> {
    if m.nrows() != m.ncols() {
        return Err(MatOpsError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    if m.nrows() == 0 {
        return Err(MatOpsError::Empty);
    }
    Ok(())
}

fn check_finite<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> Result<(), MatOpsError> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let e = m[(i, j)].clone();
            if !e.clone().real().is_finite() || !e.imaginary().is_finite() {
                return Err(MatOpsError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Maximum column sum of entry moduli.
fn one_norm<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        let mut s = 0.0;
        for i in 0..m.nrows() {
            s += m[(i, j)].clone().modulus();
        }
        best = best.max(s);
    }
    best
}

/// Column-stacking vectorization.
pub fn vec_col<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_col`] for square targets.
pub fn unvec_square<T: ComplexField<RealField = f64>>(v: &DVector<T>, n: usize) -> DMatrix<T> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

// Pade numerator/denominator coefficients and 1-norm thresholds for orders
// 3, 5, 7, 9, 13, chosen so the approximant's backward error stays below
// double-precision unit roundoff.
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17_297_280.0, 8_648_640.0, 1_995_840.0, 277_200.0, 25_200.0, 1_512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

const THETA3: f64 = 1.495_585_217_958_292e-2;
const THETA5: f64 = 2.539_398_330_063_230e-1;
const THETA7: f64 = 9.504_178_996_162_932e-1;
const THETA9: f64 = 2.097_847_961_257_068;
const THETA13: f64 = 5.371_920_351_148_152;

/// U and V of the order-3/5/7/9 diagonal Pade approximant.
fn pade_uv_low<T: ComplexField<RealField = f64>>(
    a: &DMatrix<T>,
    b: &[f64],
) -> (DMatrix<T>, DMatrix<T>) {
    let n = a.nrows();
    let order = b.len() - 1;
    let half = (order - 1) / 2;
    let a2 = a * a;
    let mut even = Vec::with_capacity(half + 1);
    even.push(DMatrix::<T>::identity(n, n));
    for k in 1..=half {
        let next = &even[k - 1] * &a2;
        even.push(next);
    }
    let mut u_poly = DMatrix::<T>::zeros(n, n);
    let mut v = DMatrix::<T>::zeros(n, n);
    for k in 0..=half {
        u_poly += &even[k] * T::from_real(b[2 * k + 1]);
        v += &even[k] * T::from_real(b[2 * k]);
    }
    (a * u_poly, v)
}

/// U and V of the order-13 approximant, with the usual power splitting.
fn pade_uv_13<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let n = a.nrows();
    let b = &PADE13;
    let id = DMatrix::<T>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_hi = &a6 * T::from_real(b[13]) + &a4 * T::from_real(b[11]) + &a2 * T::from_real(b[9]);
    let u_lo = &a6 * T::from_real(b[7])
        + &a4 * T::from_real(b[5])
        + &a2 * T::from_real(b[3])
        + &id * T::from_real(b[1]);
    let u = a * (&a6 * u_hi + u_lo);
    let v_hi = &a6 * T::from_real(b[12]) + &a4 * T::from_real(b[10]) + &a2 * T::from_real(b[8]);
    let v = &a6 * v_hi
        + &a6 * T::from_real(b[6])
        + &a4 * T::from_real(b[4])
        + &a2 * T::from_real(b[2])
        + &id * T::from_real(b[0]);
    (u, v)
}

/// Matrix exponential by scaling-and-squaring with diagonal Pade
/// approximants. Relative accuracy is at unit-roundoff level for the
/// dimensions this crate works with.
pub fn expm<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> Result<DMatrix<T>, MatOpsError> {
    check_square(a)?;
    check_finite(a)?;
    if a.nrows() == 1 {
        return Ok(DMatrix::from_element(1, 1, a[(0, 0)].clone().exp()));
    }
    let norm = one_norm(a);
    let (u, v, squarings) = if norm <= THETA3 {
        let (u, v) = pade_uv_low(a, &PADE3);
        (u, v, 0)
    } else if norm <= THETA5 {
        let (u, v) = pade_uv_low(a, &PADE5);
        (u, v, 0)
    } else if norm <= THETA7 {
        let (u, v) = pade_uv_low(a, &PADE7);
        (u, v, 0)
    } else if norm <= THETA9 {
        let (u, v) = pade_uv_low(a, &PADE9);
        (u, v, 0)
    } else {
        let s = ((norm / THETA13).log2().ceil() as i32).max(0);
        let scaled = a * T::from_real(0.5f64.powi(s));
        let (u, v) = pade_uv_13(&scaled);
        (u, v, s)
    };
    let denom = &v - &u;
    let numer = &v + &u;
    let mut x = denom
        .lu()
        .solve(&numer)
        .ok_or(MatOpsError::SolveFailed { context: "inverting the Pade denominator" })?;
    for _ in 0..squarings {
        x = &x * &x;
    }
    Ok(x)
}

/// Largest real part over the spectrum.
///
/// Complex input is reduced to the real case through the 2n x 2n embedding
/// `[[Re, -Im], [Im, Re]]`, whose spectrum is the original spectrum together
/// with its conjugate, leaving the maximal real part unchanged.
pub fn spectral_abscissa<T: ComplexField<RealField = f64>>(
    m: &DMatrix<T>,
) -> Result<f64, MatOpsError> {
    check_square(m)?;
    check_finite(m)?;
    let n = m.nrows();
    let complex_input = (0..n).any(|i| (0..n).any(|j| m[(i, j)].clone().imaginary() != 0.0));
    let real = if complex_input {
        RealMatrix::from_fn(2 * n, 2 * n, |i, j| {
            let e = m[(i % n, j % n)].clone();
            match (i / n, j / n) {
                (0, 0) | (1, 1) => e.real(),
                (0, 1) => -e.imaginary(),
                _ => e.imaginary(),
            }
        })
    } else {
        RealMatrix::from_fn(n, n, |i, j| m[(i, j)].clone().real())
    };
    let eigs = bounded_complex_eigenvalues(real)?;
    Ok(eigs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Eigenvalues through an iteration-capped Schur decomposition.
///
/// The unbounded iteration behind `complex_eigenvalues` can cycle forever:
/// an all-zero matrix turns into NaNs through the solver's norm prescaling,
/// and permutation-like matrices defeat its unmodified double shift. The
/// zero case is answered directly, the iteration is capped, a failed pass
/// is retried once under a fixed orthogonal similarity (which preserves the
/// spectrum and breaks such cycles), and whatever still does not settle is
/// reported as a failed solve instead of a hang.
fn bounded_complex_eigenvalues(m: RealMatrix) -> Result<Vec<Complex64>, MatOpsError> {
    let n = m.nrows();
    if m.amax() == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); n]);
    }
    let max_niter = 200 * n * n + 1000;
    if let Some(schur) = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, max_niter) {
        return Ok(schur.complex_eigenvalues().iter().cloned().collect());
    }
    let v = mixing_rotation(n);
    let rotated = &v * m * v.transpose();
    if let Some(schur) = nalgebra::linalg::Schur::try_new(rotated, f64::EPSILON, max_niter) {
        return Ok(schur.complex_eigenvalues().iter().cloned().collect());
    }
    Err(MatOpsError::SolveFailed { context: "computing eigenvalues" })
}

/// Fixed product of plane rotations used to reshuffle a matrix that stalls
/// the eigenvalue iteration.
fn mixing_rotation(n: usize) -> RealMatrix {
    let mut v = RealMatrix::identity(n, n);
    for k in 0..n.saturating_sub(1) {
        let (s, c) = (0.9 + 0.37 * k as f64).sin_cos();
        let mut g = RealMatrix::identity(n, n);
        g[(k, k)] = c;
        g[(k, k + 1)] = -s;
        g[(k + 1, k)] = s;
        g[(k + 1, k + 1)] = c;
        v = g * v;
    }
    v
}

/// Solves `A X + X A* + Q = 0` for X, where `A*` is the conjugate transpose
/// (plain transpose in the real case). `A` must be Hurwitz.
///
/// The equation is vectorized to `(I (x) A + conj(A) (x) I) vec X = -vec Q`
/// and solved densely; fine for the n <= 16 systems this crate produces.
pub fn solve_lyapunov<T: ComplexField<RealField = f64>>(
    a: &DMatrix<T>,
    q: &DMatrix<T>,
) -> Result<DMatrix<T>, MatOpsError> {
    check_square(a)?;
    check_square(q)?;
    check_finite(a)?;
    check_finite(q)?;
    let n = a.nrows();
    if q.nrows() != n {
        return Err(MatOpsError::DimensionMismatch {
            context: format!("coefficient is {n}x{n} but right-hand side is {}x{}", q.nrows(), q.ncols()),
        });
    }
    let abscissa = spectral_abscissa(a)?;
    if abscissa >= 0.0 {
        return Err(MatOpsError::NotHurwitz { abscissa });
    }
    let id = DMatrix::<T>::identity(n, n);
    let conj_a = a.map(|e| e.conjugate());
    let system = id.kronecker(a) + conj_a.kronecker(&id);
    let rhs = -vec_col(q);
    let x = system
        .lu()
        .solve(&rhs)
        .ok_or(MatOpsError::NotHurwitz { abscissa })?;
    Ok(unvec_square(&x, n))
}

/// Frobenius pairing `<X, Y> = sum conj(x_ij) y_ij`; real part is the usual
/// inner product when both arguments are Hermitian.
pub fn frobenius_inner<T: ComplexField<RealField = f64>>(
    x: &DMatrix<T>,
    y: &DMatrix<T>,
) -> Result<T, MatOpsError> {
    if x.shape() != y.shape() {
        return Err(MatOpsError::DimensionMismatch {
            context: format!("{}x{} vs {}x{}", x.nrows(), x.ncols(), y.nrows(), y.ncols()),
        });
    }
    let mut acc = T::zero();
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            acc += x[(i, j)].clone().conjugate() * y[(i, j)].clone();
        }
    }
    Ok(acc)
}

/// Symmetrizer `S(N) = (N + N*)/2` with the conjugate transpose in the
/// complex case; projects onto the symmetric (Hermitian) part.
pub fn symmetrize<T: ComplexField<RealField = f64>>(
    m: &DMatrix<T>,
) -> Result<DMatrix<T>, MatOpsError> {
    check_square(m)?;
    Ok((m + m.adjoint()) * T::from_real(0.5))
}

/// Smallest eigenvalue of a symmetric (Hermitian) matrix.
pub fn hermitian_min_eig<T: ComplexField<RealField = f64>>(
    m: &DMatrix<T>,
) -> Result<f64, MatOpsError> {
    check_square(m)?;
    check_finite(m)?;
    let eigs = m.clone().symmetric_eigenvalues();
    Ok(eigs.iter().cloned().fold(f64::INFINITY, f64::min))
}
