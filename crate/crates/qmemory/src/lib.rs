//! Performance criteria for quantum memories modelled as open quantum systems.
//!
//! The crate evaluates how well a system retains its initial condition: the
//! Heisenberg-picture mean-square deviation `Delta(t)` for open quantum
//! harmonic oscillators, the Schrodinger-picture deviation `Gamma(t)` for
//! finite-level systems, memory decoherence times `tau(eps)` defined by
//! threshold crossings of those functionals, and exponentially discounted
//! averages `M_T` that trade the hard horizon for a soft one. On top of the
//! evaluators sit parameter-optimization routines that tune the energy and
//! coupling matrices of an oscillator to hold memory longer.
//!
//! The `guide` module mirrors the mdbook under `book/`; its chapters double
//! as doc-tests so the examples in the book stay compilable.

pub mod matops;
pub mod models;
pub mod functionals;
pub mod decoherence;
pub mod discounted;
pub mod optimize;
pub mod cli;

pub mod guide;

#[cfg(test)]
pub(crate) mod testutil;
