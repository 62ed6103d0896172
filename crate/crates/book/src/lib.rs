//! Compiles the guide's code blocks as doctests so they track the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}

#[doc = include_str!("../../../book/src/exact.md")]
pub mod exact {}

#[doc = include_str!("../../../book/src/structure.md")]
pub mod structure {}

#[doc = include_str!("../../../book/src/params.md")]
pub mod params {}

#[doc = include_str!("../../../book/src/sparsitron.md")]
pub mod sparsitron {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
