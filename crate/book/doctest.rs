// mdbook cannot run listings against an external crate, so every chapter is
// included here as a doc comment and `cargo test` runs the listings.

#[doc = include_str!("src/intro.md")]
pub mod intro {}
#[doc = include_str!("src/equilibrium.md")]
pub mod equilibrium {}
#[doc = include_str!("src/identification.md")]
pub mod identification {}
#[doc = include_str!("src/diagnostics.md")]
pub mod diagnostics {}
#[doc = include_str!("src/phases.md")]
pub mod phases {}
#[doc = include_str!("src/traces.md")]
pub mod traces {}
#[doc = include_str!("src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
#[doc = include_str!("../README.md")]
pub mod readme {}
