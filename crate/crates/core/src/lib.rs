// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod dist;
pub mod error;
pub mod harness;
pub mod mc;
pub mod panjer;
pub mod particle;
pub mod quad;
pub mod rng;
pub mod smc;
pub mod special;

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/monte_carlo.md")]
    mod monte_carlo {}
    #[doc = include_str!("../../../book/src/single_loss.md")]
    mod single_loss {}
    #[doc = include_str!("../../../book/src/panjer.md")]
    mod panjer {}
    #[doc = include_str!("../../../book/src/particle.md")]
    mod particle {}
    #[doc = include_str!("../../../book/src/rare_event.md")]
    mod rare_event {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
