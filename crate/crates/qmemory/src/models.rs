//! System models: open quantum harmonic oscillators in moment form and
//! finite-level systems with Lindblad dynamics.
//!
//! An oscillator is built either from a physical realization (CCR matrix
//! Theta, energy matrix R, coupling matrix M) or directly from its drift and
//! dispersion pair. Finite-level systems carry a Hamiltonian, an even list
//! of Hermitian coupling operators driven by vacuum noise with Ito matrix
//! Omega = I + iJ, and an initial density matrix. The Lindblad generator is
//! assembled as a d^2 x d^2 matrix acting on column-stacked states.

use num_complex::Complex64;
use thiserror::Error;

use crate::matops::{self, ComplexMatrix, MatOpsError, RealMatrix};

/// Entrywise tolerance for symmetry and Hermiticity checks.
const SYM_TOL: f64 = 1e-12;
/// Eigenvalue floor for positive-semidefiniteness checks.
const PSD_TOL: f64 = -1e-10;
/// Relative singular-value cutoff for the full-row-rank check.
const RANK_TOL: f64 = 1e-10;
/// Tolerance on the assembled adjoint and trace-annihilation identities.
const ASSEMBLY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Mat(#[from] MatOpsError),
    #[error("{field}: dimension must be even, got {got}")]
    OddDimension { field: &'static str, got: usize },
    #[error("{field}: expected {expected}, got {got}")]
    Shape { field: &'static str, expected: String, got: String },
    #[error("{field}: must be symmetric (max asymmetry {defect:.3e})")]
    NotSymmetric { field: &'static str, defect: f64 },
    #[error("{field}: must be antisymmetric (max defect {defect:.3e})")]
    NotAntisymmetric { field: &'static str, defect: f64 },
    #[error("{field}: must be Hermitian (max defect {defect:.3e})")]
    NotHermitian { field: &'static str, defect: f64 },
    #[error("{field}: must be positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd { field: &'static str, min_eig: f64 },
    #[error("weight: must have full row rank (min/max singular value ratio {ratio:.3e})")]
    RankDeficientWeight { ratio: f64 },
    #[error("initial state: trace must be 1, got {got:.6e}")]
    NotUnitTrace { got: f64 },
    #[error("couplings: count must be even, got {got}; pad a single-channel dissipator with an explicit zero coupling")]
    OddCouplingCount { got: usize },
    #[error("Hilbert-space dimension must be at least 2, got {got}")]
    DimensionTooSmall { got: usize },
    #[error("superoperator assembly self-check failed: {what} defect {defect:.3e}")]
    AssemblyCheck { what: &'static str, defect: f64 },
}

fn real_shape_err(field: &'static str, expected: (usize, usize), m: &RealMatrix) -> ModelError {
    ModelError::Shape {
        field,
        expected: format!("{}x{}", expected.0, expected.1),
        got: format!("{}x{}", m.nrows(), m.ncols()),
    }
}

fn check_real_finite(field: &'static str, m: &RealMatrix) -> Result<(), ModelError> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(ModelError::Shape {
                    field,
                    expected: "finite entries".into(),
                    got: format!("non-finite entry at ({i}, {j})"),
                });
            }
        }
    }
    Ok(())
}

fn check_complex_finite(field: &'static str, m: &ComplexMatrix) -> Result<(), ModelError> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let e = m[(i, j)];
            if !e.re.is_finite() || !e.im.is_finite() {
                return Err(ModelError::Shape {
                    field,
                    expected: "finite entries".into(),
                    got: format!("non-finite entry at ({i}, {j})"),
                });
            }
        }
    }
    Ok(())
}

/// Max-modulus deviation from symmetry.
fn symmetry_defect(m: &RealMatrix) -> f64 {
    (m - m.transpose()).amax()
}

/// Max-modulus deviation from Hermiticity.
fn hermiticity_defect(m: &ComplexMatrix) -> f64 {
    (m - m.adjoint()).map(|e| e.norm()).max()
}

/// The 2x2 pairing block [[0, 1], [-1, 0]].
fn pairing_block() -> RealMatrix {
    matops::try_real_matrix(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).expect("static block")
}

/// Block pairing matrix `I_{dim/2} (x) [[0,1],[-1,0]]`; `dim` must be even.
pub fn block_pairing(dim: usize) -> RealMatrix {
    assert!(dim >= 2 && dim % 2 == 0, "pairing matrix needs an even dimension");
    RealMatrix::identity(dim / 2, dim / 2).kronecker(&pairing_block())
}

/// Canonical CCR matrix (1/2) I (x) [[0,1],[-1,0]] for position-momentum pairs.
pub fn canonical_theta(n: usize) -> RealMatrix {
    block_pairing(n) * 0.5
}

/// Open quantum harmonic oscillator in moment form.
///
/// Physical mode keeps the (Theta, R, M) realization required by the
/// optimizers; raw mode stores only the derived drift/dispersion pair.
#[derive(Debug, Clone)]
pub struct OqhoModel {
    n: usize,
    noise_dim: usize,
    theta: Option<RealMatrix>,
    energy: Option<RealMatrix>,
    coupling: Option<RealMatrix>,
    weight: RealMatrix,
    p0: RealMatrix,
    drift: RealMatrix,
    dispersion: RealMatrix,
    sigma_weight: RealMatrix,
    uncertainty_min_eig: Option<f64>,
}

impl OqhoModel {
    /// Number of system variables.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of noise channels (columns of the dispersion matrix).
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift(&self) -> &RealMatrix {
        &self.drift
    }

    pub fn dispersion(&self) -> &RealMatrix {
        &self.dispersion
    }

    pub fn weight(&self) -> &RealMatrix {
        &self.weight
    }

    /// Initial second-moment matrix P.
    pub fn p0(&self) -> &RealMatrix {
        &self.p0
    }

    /// Weighting Gram matrix Sigma = F^T F.
    pub fn sigma_weight(&self) -> &RealMatrix {
        &self.sigma_weight
    }

    pub fn theta(&self) -> Option<&RealMatrix> {
        self.theta.as_ref()
    }

    pub fn energy(&self) -> Option<&RealMatrix> {
        self.energy.as_ref()
    }

    pub fn coupling(&self) -> Option<&RealMatrix> {
        self.coupling.as_ref()
    }

    /// True when the (Theta, R, M) realization is available.
    pub fn is_physical(&self) -> bool {
        self.theta.is_some()
    }

    /// Minimum eigenvalue of P + i*Theta (physical mode only). A value
    /// significantly below zero means no quantum state has this second
    /// moment; construction still succeeds so analysis mode can explore it.
    pub fn uncertainty_min_eig(&self) -> Option<f64> {
        self.uncertainty_min_eig
    }

    /// True when the uncertainty check P + i*Theta >= 0 fails beyond
    /// tolerance; reported as a warning by the CLI, never an error.
    pub fn uncertainty_warning(&self) -> bool {
        matches!(self.uncertainty_min_eig, Some(e) if e < PSD_TOL)
    }
}

fn validate_weight_p0(
    n: usize,
    weight: &RealMatrix,
    p0: &RealMatrix,
) -> Result<(RealMatrix, RealMatrix, RealMatrix), ModelError> {
    check_real_finite("weight", weight)?;
    check_real_finite("p0", p0)?;
    if weight.ncols() != n || weight.nrows() == 0 {
        return Err(real_shape_err("weight", (weight.nrows().max(1), n), weight));
    }
    let svd = weight.clone().svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if weight.nrows() > weight.ncols() || s_max <= 0.0 || s_min <= RANK_TOL * s_max {
        return Err(ModelError::RankDeficientWeight {
            ratio: if s_max > 0.0 { s_min / s_max } else { 0.0 },
        });
    }
    if p0.nrows() != n || p0.ncols() != n {
        return Err(real_shape_err("p0", (n, n), p0));
    }
    let defect = symmetry_defect(p0);
    if defect > SYM_TOL * p0.amax().max(1.0) {
        return Err(ModelError::NotSymmetric { field: "p0", defect });
    }
    let p0_sym = matops::symmetrize(p0)?;
    let min_eig = matops::hermitian_min_eig(&p0_sym)?;
    if min_eig < PSD_TOL {
        return Err(ModelError::NotPsd { field: "p0", min_eig });
    }
    let sigma_weight = weight.transpose() * weight;
    Ok((weight.clone(), p0_sym, sigma_weight))
}

/// Builds an oscillator from its physical realization.
///
/// Derived matrices: drift A = 2*Theta*(R + M^T J M), dispersion
/// B = 2*Theta*M^T, weighting Gram matrix Sigma = F^T F, with J the block
/// pairing of the noise channels.
pub fn build_oqho(
    theta: &RealMatrix,
    energy: &RealMatrix,
    coupling: &RealMatrix,
    weight: &RealMatrix,
    p0: &RealMatrix,
) -> Result<OqhoModel, ModelError> {
    check_real_finite("theta", theta)?;
    check_real_finite("energy", energy)?;
    check_real_finite("coupling", coupling)?;
    let n = theta.nrows();
    if theta.ncols() != n || n == 0 {
        return Err(real_shape_err("theta", (n.max(2), n.max(2)), theta));
    }
    if n % 2 != 0 {
        return Err(ModelError::OddDimension { field: "theta", got: n });
    }
    let anti_defect = (theta + theta.transpose()).amax();
    if anti_defect > SYM_TOL * theta.amax().max(1.0) {
        return Err(ModelError::NotAntisymmetric { field: "theta", defect: anti_defect });
    }
    if energy.nrows() != n || energy.ncols() != n {
        return Err(real_shape_err("energy", (n, n), energy));
    }
    let defect = symmetry_defect(energy);
    if defect > SYM_TOL * energy.amax().max(1.0) {
        return Err(ModelError::NotSymmetric { field: "energy", defect });
    }
    let energy_sym = matops::symmetrize(energy)?;
    let m = coupling.nrows();
    if coupling.ncols() != n || m == 0 {
        return Err(real_shape_err("coupling", (m.max(2), n), coupling));
    }
    if m % 2 != 0 {
        return Err(ModelError::OddDimension { field: "coupling", got: m });
    }
    let (weight, p0_sym, sigma_weight) = validate_weight_p0(n, weight, p0)?;

    let j = block_pairing(m);
    let drift = theta * (&energy_sym + coupling.transpose() * &j * coupling) * 2.0;
    let dispersion = theta * coupling.transpose() * 2.0;

    // Heisenberg-uncertainty diagnostic: min eigenvalue of P + i*Theta.
    let herm = ComplexMatrix::from_fn(n, n, |i, jj| {
        Complex64::new(p0_sym[(i, jj)], theta[(i, jj)])
    });
    let uncertainty_min_eig = matops::hermitian_min_eig(&herm)?;

    Ok(OqhoModel {
        n,
        noise_dim: m,
        theta: Some(theta.clone()),
        energy: Some(energy_sym),
        coupling: Some(coupling.clone()),
        weight,
        p0: p0_sym,
        drift,
        dispersion,
        sigma_weight,
        uncertainty_min_eig: Some(uncertainty_min_eig),
    })
}

/// Builds an oscillator directly from drift and dispersion (analysis mode).
/// Optimization over (R, M) is unavailable for models built this way.
pub fn build_oqho_raw(
    drift: &RealMatrix,
    dispersion: &RealMatrix,
    weight: &RealMatrix,
    p0: &RealMatrix,
) -> Result<OqhoModel, ModelError> {
    check_real_finite("drift", drift)?;
    check_real_finite("dispersion", dispersion)?;
    let n = drift.nrows();
    if drift.ncols() != n || n == 0 {
        return Err(real_shape_err("drift", (n.max(1), n.max(1)), drift));
    }
    if dispersion.nrows() != n || dispersion.ncols() == 0 {
        return Err(real_shape_err("dispersion", (n, dispersion.ncols().max(2)), dispersion));
    }
    let m = dispersion.ncols();
    if m % 2 != 0 {
        return Err(ModelError::OddDimension { field: "dispersion", got: m });
    }
    let (weight, p0_sym, sigma_weight) = validate_weight_p0(n, weight, p0)?;
    Ok(OqhoModel {
        n,
        noise_dim: m,
        theta: None,
        energy: None,
        coupling: None,
        weight,
        p0: p0_sym,
        drift: drift.clone(),
        dispersion: dispersion.clone(),
        sigma_weight,
        uncertainty_min_eig: None,
    })
}

/// Finite-level open system: Hamiltonian, an even list of Hermitian coupling
/// operators, the vacuum Ito matrix Omega = I + iJ, and the initial state.
#[derive(Debug, Clone)]
pub struct FiniteLevelModel {
    d: usize,
    hamiltonian: ComplexMatrix,
    couplings: Vec<ComplexMatrix>,
    ito: ComplexMatrix,
    sigma0: ComplexMatrix,
}

impl FiniteLevelModel {
    /// Hilbert-space dimension.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn hamiltonian(&self) -> &ComplexMatrix {
        &self.hamiltonian
    }

    pub fn couplings(&self) -> &[ComplexMatrix] {
        &self.couplings
    }

    /// Quantum Ito matrix Omega = I + iJ of the vacuum noise.
    pub fn ito(&self) -> &ComplexMatrix {
        &self.ito
    }

    /// Initial density matrix, stored exactly Hermitian.
    pub fn sigma0(&self) -> &ComplexMatrix {
        &self.sigma0
    }
}

/// Validates and assembles a finite-level model.
///
/// The initial state is re-Hermitized after the tolerance check so that the
/// deviation functional vanishes exactly at t = 0.
pub fn build_finite_level(
    hamiltonian: &ComplexMatrix,
    couplings: &[ComplexMatrix],
    sigma0: &ComplexMatrix,
) -> Result<FiniteLevelModel, ModelError> {
    check_complex_finite("hamiltonian", hamiltonian)?;
    check_complex_finite("sigma0", sigma0)?;
    let d = hamiltonian.nrows();
    if hamiltonian.ncols() != d || d < 2 {
        return Err(ModelError::DimensionTooSmall { got: d.min(hamiltonian.ncols()) });
    }
    let h_defect = hermiticity_defect(hamiltonian);
    if h_defect > SYM_TOL * hamiltonian.map(|e| e.norm()).max().max(1.0) {
        return Err(ModelError::NotHermitian { field: "hamiltonian", defect: h_defect });
    }
    if couplings.is_empty() || couplings.len() % 2 != 0 {
        return Err(ModelError::OddCouplingCount { got: couplings.len() });
    }
    for l in couplings {
        check_complex_finite("couplings", l)?;
        if l.nrows() != d || l.ncols() != d {
            return Err(ModelError::Shape {
                field: "couplings",
                expected: format!("{d}x{d}"),
                got: format!("{}x{}", l.nrows(), l.ncols()),
            });
        }
        let defect = hermiticity_defect(l);
        if defect > SYM_TOL * l.map(|e| e.norm()).max().max(1.0) {
            return Err(ModelError::NotHermitian { field: "couplings", defect });
        }
    }
    if sigma0.nrows() != d || sigma0.ncols() != d {
        return Err(ModelError::Shape {
            field: "sigma0",
            expected: format!("{d}x{d}"),
            got: format!("{}x{}", sigma0.nrows(), sigma0.ncols()),
        });
    }
    let s_defect = hermiticity_defect(sigma0);
    if s_defect > SYM_TOL {
        return Err(ModelError::NotHermitian { field: "sigma0", defect: s_defect });
    }
    let trace: Complex64 = sigma0.diagonal().iter().sum();
    if (trace.re - 1.0).abs() > SYM_TOL || trace.im.abs() > SYM_TOL {
        return Err(ModelError::NotUnitTrace { got: trace.re });
    }
    let sigma0_herm = (sigma0 + sigma0.adjoint()) * Complex64::new(0.5, 0.0);
    let min_eig = matops::hermitian_min_eig(&sigma0_herm)?;
    if min_eig < PSD_TOL {
        return Err(ModelError::NotPsd { field: "sigma0", min_eig });
    }

    let m = couplings.len();
    let j = block_pairing(m);
    let ito = ComplexMatrix::from_fn(m, m, |r, c| {
        Complex64::new(if r == c { 1.0 } else { 0.0 }, j[(r, c)])
    });
    let couplings_herm: Vec<ComplexMatrix> = couplings
        .iter()
        .map(|l| (l + l.adjoint()) * Complex64::new(0.5, 0.0))
        .collect();
    Ok(FiniteLevelModel {
        d,
        hamiltonian: (hamiltonian + hamiltonian.adjoint()) * Complex64::new(0.5, 0.0),
        couplings: couplings_herm,
        ito,
        sigma0: sigma0_herm,
    })
}

/// Lindblad generator and its adjoint as matrices on column-stacked states.
#[derive(Debug, Clone)]
pub struct Lindbladian {
    dim: usize,
    matrix: ComplexMatrix,
    adjoint_matrix: ComplexMatrix,
}

impl Lindbladian {
    /// Hilbert-space dimension d; the matrices are d^2 x d^2.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Matrix of the generator acting on vec(sigma).
    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    /// Matrix of the adjoint generator (Heisenberg picture).
    pub fn adjoint_matrix(&self) -> &ComplexMatrix {
        &self.adjoint_matrix
    }

    /// Applies the generator to a d x d matrix.
    pub fn apply(&self, x: &ComplexMatrix) -> ComplexMatrix {
        let v = self.matrix() * matops::vec_col(x);
        matops::unvec_square(&v, self.dim)
    }

    /// Applies the adjoint generator to a d x d matrix.
    pub fn apply_adjoint(&self, x: &ComplexMatrix) -> ComplexMatrix {
        let v = self.adjoint_matrix() * matops::vec_col(x);
        matops::unvec_square(&v, self.dim)
    }
}

/// Assembles the vectorized Lindblad generator
/// `L(sigma) = -i[H, sigma] + sum conj(Omega_jk) L_j sigma L_k
///  - (1/2){sum Omega_jk L_j L_k, sigma}`
/// and its adjoint, using vec(AXB) = (B^T (x) A) vec(X) with column
/// stacking. The adjoint must equal the conjugate transpose; both that and
/// trace annihilation are verified before returning.
pub fn assemble_lindbladian(model: &FiniteLevelModel) -> Result<Lindbladian, ModelError> {
    let d = model.d;
    let m = model.couplings.len();
    let id = ComplexMatrix::identity(d, d);
    let i_unit = Complex64::new(0.0, 1.0);
    let half = Complex64::new(0.5, 0.0);

    let h = &model.hamiltonian;
    let commutator_part = id.kronecker(h) - h.transpose().kronecker(&id);

    let mut dissipator = ComplexMatrix::zeros(d * d, d * d);
    let mut dissipator_adj = ComplexMatrix::zeros(d * d, d * d);
    let mut quad = ComplexMatrix::zeros(d, d);
    for jj in 0..m {
        for kk in 0..m {
            let w = model.ito[(jj, kk)];
            if w == Complex64::new(0.0, 0.0) {
                continue;
            }
            let sandwich = model.couplings[kk].transpose().kronecker(&model.couplings[jj]);
            dissipator += &sandwich * w.conj();
            dissipator_adj += &sandwich * w;
            quad += &model.couplings[jj] * &model.couplings[kk] * w;
        }
    }
    let anticommutator = (id.kronecker(&quad) + quad.transpose().kronecker(&id)) * half;

    let matrix = &commutator_part * (-i_unit) + &dissipator - &anticommutator;
    let adjoint_matrix = &commutator_part * i_unit + &dissipator_adj - &anticommutator;

    let adj_defect = (&adjoint_matrix - matrix.adjoint()).map(|e| e.norm()).max();
    if adj_defect > ASSEMBLY_TOL {
        return Err(ModelError::AssemblyCheck { what: "adjoint", defect: adj_defect });
    }
    let vec_id = matops::vec_col(&id);
    let trace_row = matrix.adjoint() * &vec_id;
    let trace_defect = trace_row.map(|e| e.norm()).max();
    if trace_defect > ASSEMBLY_TOL {
        return Err(ModelError::AssemblyCheck { what: "trace annihilation", defect: trace_defect });
    }

    Ok(Lindbladian { dim: d, matrix, adjoint_matrix })
}
