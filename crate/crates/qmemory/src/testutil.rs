//! Shared fixtures for the unit tests: reference models with known closed
//! forms and seeded random model generators.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::matops::{self, ComplexMatrix, RealMatrix};
use crate::models::{
    assemble_lindbladian, build_finite_level, build_oqho_raw, FiniteLevelModel, Lindbladian,
    OqhoModel,
};

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn sigma_x() -> ComplexMatrix {
    matops::try_complex_matrix(&[
        vec![(0.0, 0.0), (1.0, 0.0)],
        vec![(1.0, 0.0), (0.0, 0.0)],
    ])
    .unwrap()
}

pub(crate) fn sigma_z() -> ComplexMatrix {
    matops::try_complex_matrix(&[
        vec![(1.0, 0.0), (0.0, 0.0)],
        vec![(0.0, 0.0), (-1.0, 0.0)],
    ])
    .unwrap()
}

/// Pure qubit state (I + sigma_x)/2.
pub(crate) fn plus_x_state() -> ComplexMatrix {
    matops::try_complex_matrix(&[
        vec![(0.5, 0.0), (0.5, 0.0)],
        vec![(0.5, 0.0), (0.5, 0.0)],
    ])
    .unwrap()
}

/// Reference oscillator: A = -I, B = sqrt(2) I, F = I, P = I/2.
/// Closed form: Delta(t) = (1 - e^-t)^2 + 2 (1 - e^-2t), Delta_* = 1.
pub(crate) fn damped_pair() -> OqhoModel {
    let id2 = RealMatrix::identity(2, 2);
    build_oqho_raw(&(&id2 * -1.0), &(&id2 * 2.0f64.sqrt()), &id2, &(&id2 * 0.5)).unwrap()
}

pub(crate) fn damped_pair_delta(t: f64) -> f64 {
    let a = 1.0 - (-t).exp();
    a * a + 2.0 * (1.0 - (-2.0 * t).exp())
}

pub(crate) fn damped_pair_delta_dot(t: f64) -> f64 {
    2.0 * (1.0 - (-t).exp()) * (-t).exp() + 4.0 * (-2.0 * t).exp()
}

pub(crate) fn damped_pair_delta_ddot(t: f64) -> f64 {
    -2.0 * (-t).exp() - 4.0 * (-2.0 * t).exp()
}

/// Dephasing qubit: H = 0, L1 = sigma_z, L2 = 0, sigma0 = (I + sigma_x)/2.
/// Closed forms: sigma(t) = (I + e^-2t sigma_x)/2, Gamma(t) = (1 - e^-2t)^2 / 2.
pub(crate) fn dephasing() -> (FiniteLevelModel, Lindbladian) {
    let model = dephasing_model_padded(2);
    let lind = assemble_lindbladian(&model).unwrap();
    (model, lind)
}

pub(crate) fn dephasing_gamma(t: f64) -> f64 {
    let a = 1.0 - (-2.0 * t).exp();
    0.5 * a * a
}

/// Dephasing model padded to `m` noise channels (extra couplings zero).
pub(crate) fn dephasing_model_padded(m: usize) -> FiniteLevelModel {
    let mut couplings = vec![sigma_z()];
    couplings.resize(m, ComplexMatrix::zeros(2, 2));
    build_finite_level(&ComplexMatrix::zeros(2, 2), &couplings, &plus_x_state()).unwrap()
}

pub(crate) fn random_hermitian(d: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
    let raw = ComplexMatrix::from_fn(d, d, |_, _| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    (&raw + raw.adjoint()) * Complex64::new(0.5, 0.0)
}

pub(crate) fn random_density(d: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
    let g = ComplexMatrix::from_fn(d, d, |_, _| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let gram = &g * g.adjoint();
    let trace: Complex64 = gram.diagonal().iter().sum();
    gram * (Complex64::new(1.0, 0.0) / trace)
}

/// Random validated finite-level model with two Hermitian couplings.
pub(crate) fn random_finite_level(
    d: usize,
    rng: &mut ChaCha8Rng,
) -> (FiniteLevelModel, Lindbladian) {
    let h = random_hermitian(d, rng);
    let l1 = random_hermitian(d, rng) * Complex64::new(0.8, 0.0);
    let l2 = random_hermitian(d, rng) * Complex64::new(0.5, 0.0);
    let sigma0 = random_density(d, rng);
    let model = build_finite_level(&h, &[l1, l2], &sigma0).unwrap();
    let lind = assemble_lindbladian(&model).unwrap();
    (model, lind)
}

/// Random raw-mode oscillator with the drift shifted to a target spectral
/// abscissa, full-rank weight and PSD initial moment.
pub(crate) fn random_oqho_raw(
    n: usize,
    m: usize,
    target_abscissa: f64,
    rng: &mut ChaCha8Rng,
) -> OqhoModel {
    let raw = RealMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let shift = matops::spectral_abscissa(&raw).unwrap() - target_abscissa;
    let a = raw - RealMatrix::identity(n, n) * shift;
    let b = RealMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
    let f = RealMatrix::identity(n, n)
        + RealMatrix::from_fn(n, n, |_, _| 0.2 * rng.gen_range(-1.0..1.0));
    let c = RealMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let p = &c * c.transpose() * (0.5 / n as f64);
    build_oqho_raw(&a, &b, &f, &p).unwrap()
}
