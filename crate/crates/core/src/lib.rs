//! Particle simulation of the Wasserstein gradient flow of a regularized
//! mean-field neural ODE objective.
//!
//! A network of infinite depth is a curve `t ↦ η_t` of parameter measures on
//! `t ∈ [0, 1]`; data moves along `ẋ = ∫ v(x, θ) dη_t(θ)` and the objective is
//!
//! ```text
//! J(η) = ∫ ℓ(X_1(x), y) dμ₀(x, y) + (λ/2) ∫₀¹ ∫ |θ|² dη_t(θ) dt.
//! ```
//!
//! The crate discretizes `η` as `L` layers of `N` particles, computes the
//! Wasserstein gradient of `J` with an exact discrete adjoint, integrates the
//! gradient flow, and fits the convergence diagnostics on the result.
//!
//! | module | contents |
//! |---|---|
//! | [`measures`] | discrete measures, paths, exact W₂, Dirichlet energy |
//! | [`model`] | `LinearTanh` / `GatedTanh` fields and the squared loss |
//! | [`dynamics`] | RK4 flow map, costates, fundamental matrix |
//! | [`objective`] | `J`, flat derivative, gradient field, slope |
//! | [`flow`] | Euler particle flow, traces, dissipation |
//! | [`analysis`] | `J*`, Łojasiewicz fit, rate branch, convexity probe |
//! | [`cli`] | experiment configs, data generators, subcommands |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod measures;
pub mod model;
pub mod objective;

pub use error::{Error, Result};
pub use measures::{DataMeasure, DiscreteMeasure, ParameterPath, TransportPlan};
pub use model::{LossModel, ModelKind, VectorFieldModel};
pub use objective::{GradientField, ObjectiveReport, Problem};
