//! Runs the code listings of the guide as doc-tests, so the book cannot
//! drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/ensembles.md")]
mod ensembles {}

#[doc = include_str!("../../../book/src/box-constraints.md")]
mod box_constraints {}

#[doc = include_str!("../../../book/src/forward-models.md")]
mod forward_models {}

#[doc = include_str!("../../../book/src/flows.md")]
mod flows {}

#[doc = include_str!("../../../book/src/reference-solvers.md")]
mod reference_solvers {}

#[doc = include_str!("../../../book/src/diagnostics.md")]
mod diagnostics {}

#[doc = include_str!("../../../book/src/experiments.md")]
mod experiments {}
