// Each chapter of the guide is attached to an empty module so that
// `cargo test --doc` compiles and runs its listings.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/turbulence.md")]
pub mod turbulence {}
#[doc = include_str!("../../../book/src/pass_geometry.md")]
pub mod pass_geometry {}
#[doc = include_str!("../../../book/src/frontend.md")]
pub mod frontend {}
#[doc = include_str!("../../../book/src/tracking.md")]
pub mod tracking {}
#[doc = include_str!("../../../book/src/polarization.md")]
pub mod polarization {}
#[doc = include_str!("../../../book/src/qkd.md")]
pub mod qkd {}
#[doc = include_str!("../../../book/src/bus.md")]
pub mod bus {}
#[doc = include_str!("../../../book/src/controller.md")]
pub mod controller {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
