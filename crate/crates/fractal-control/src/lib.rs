//! Numerical laboratory for controlled diffusions on the Sierpinski gasket.
//!
//! The crate is organised bottom-up:
//!
//! - [`gasket`] — exact combinatorics of the level-`m` graph approximations
//!   (vertices, edges, cells, address arithmetic, Hausdorff measure).
//! - [`dirichlet`] — harmonic extension, graph Dirichlet energy, harmonic
//!   energy measures and the Kusuoka measure, in exact rational arithmetic.
//! - [`diffusion`] — a nearest-neighbour walk whose clock is driven by the
//!   Kusuoka vertex density, together with the one-dimensional martingale
//!   `W` it carries, plus kernel / moment / singularity estimators.
//! - [`control`] — controlled scalar state dynamics driven by `(t, QV, W)`,
//!   spike perturbations, first/second variation processes and Hamiltonians.
//! - [`regulator`] — the closed-form linear–quadratic benchmark: feedback
//!   law, adjoint recovery by regression, and a cost tournament.
//! - [`cli`] — the `fractal-control` command-line experiment driver.
//!
//! All Monte-Carlo entry points are deterministic: every path owns a counter
//! keyed RNG stream, and parallel reductions merge fixed-size blocks in index
//! order, so results are bit-identical for any worker count.

pub mod cli;
pub mod control;
pub mod diffusion;
pub mod dirichlet;
pub mod error;
pub mod gasket;
pub mod regulator;
pub mod rng;
pub mod stats;
pub mod tol;

pub use error::{Error, Result};
