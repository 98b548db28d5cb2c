//! A guided tour of the crate, mirrored from the book under `book/` at the
//! repository root.
//!
//! Each submodule embeds one chapter verbatim, so the code blocks in the
//! book compile and run as doc-tests of this module. If a book example
//! drifts out of sync with the API, `cargo test` fails.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/functionals.md")]
pub mod functionals {}

#[doc = include_str!("../../../book/src/decoherence.md")]
pub mod decoherence {}

#[doc = include_str!("../../../book/src/discounted.md")]
pub mod discounted {}

#[doc = include_str!("../../../book/src/optimization.md")]
pub mod optimization {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
