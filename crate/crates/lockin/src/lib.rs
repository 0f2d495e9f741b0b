//! Lock-in domain estimation for a grid-following inverter.
//!
//! A synchronous-reference-frame PLL driven through a PI current controller
//! forms a cascade: a linear, exponentially stable current-control error block
//! feeds a two-dimensional nonlinear phase-lock block. This crate bounds the
//! set of initial conditions from which the PLL re-locks without slipping a
//! pole, by
//!
//! 1. building a quadratic gauge `V_cc = x' P x` with a certified decay rate
//!    for the current-control block ([`gauge`]),
//! 2. replacing the current-control disturbance by its worst case over the
//!    sublevel ellipsoid `V_cc <= V`, which turns the PLL into a planar
//!    comparison system whose stable limit cycles are the level curves of a
//!    PLL gauge `V_pll` ([`extremal`], [`dae`], [`family`]),
//! 3. tabulating the worst-case growth rate of `V_pll` as a function of both
//!    gauge values ([`growth`]),
//! 4. propagating the admissible `V_pll` budget beyond the trivial square
//!    `max(V_pll, V_cc) <= V_bar` through a scalar comparison ODE
//!    ([`domain`]), and
//! 5. validating the resulting region with seeded Monte-Carlo simulation of
//!    the full system ([`sim`]).
//!
//! The inverter model is pluggable through [`model::CascadeModel`]; a fully
//! derived default is provided by [`model::default_inverter_model`].

// Negated float comparisons are deliberate throughout: `!(x > 0.0)` rejects
// NaN, while the suggested `x <= 0.0` silently lets NaN through a guard.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod comparison;
pub mod dae;
pub mod domain;
pub mod error;
pub mod extremal;
pub mod family;
pub mod gauge;
pub mod growth;
pub mod model;
pub mod ode;
pub mod sim;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
