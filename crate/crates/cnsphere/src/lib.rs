//! Cournot-Nash equilibria on the round sphere (S^1 and S^2).
//!
//! A Cournot-Nash equilibrium couples a fixed agent distribution mu with an
//! endogenous strategy distribution nu through the total cost
//! `Phi(x, y, nu) = c(x, y) + f(nu(y)) + (phi * nu)(y) + V(y)`, where
//! `c = d^2/2` is the squared geodesic distance, `f` is a congestion
//! penalty, `phi` an interaction kernel, and `V` an external potential.
//! Equilibria are computed by continuation in a parameter `t` that
//! interpolates the source measure from uniform to mu and scales `phi` and
//! `V`; each stage is solved as a joint convex problem by block-coordinate
//! ascent on the entropic transport dual with a damped Newton corrector.
//!
//! Module layout:
//! - [`sphere`]: grids, geodesic geometry, cost matrices, normal-coordinate charts
//! - [`model`]: congestion/interaction/potential families, measures, energy
//! - [`transport`]: log-domain Sinkhorn, exact LP oracle, c-transform, map extraction
//! - [`equilibrium`]: continuation stages, the joint stage solver, best reply, residuals
//! - [`analysis`]: discrete Laplacian, linearized operator, MTW tensor, a priori bounds
//! - [`cli`]: JSON-configured runs, scenario suite, CSV/JSON output

pub mod analysis;
pub mod cli;
pub mod equilibrium;
mod error;
pub mod model;
pub mod sphere;
pub mod transport;

pub use error::{Error, Result};
