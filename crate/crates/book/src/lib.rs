//! The guide's chapters as doc comments, so `cargo test` runs every listing.
//! One module per chapter keeps failures traceable to their file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/solvers.md")]
pub mod solvers {}
#[doc = include_str!("../../../book/src/backward.md")]
pub mod backward {}
#[doc = include_str!("../../../book/src/layer.md")]
pub mod layer {}
#[doc = include_str!("../../../book/src/kalman.md")]
pub mod kalman {}
#[doc = include_str!("../../../book/src/precision.md")]
pub mod precision {}
#[doc = include_str!("../../../book/src/mqar.md")]
pub mod mqar {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
