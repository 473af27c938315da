//! Numerical laboratory for singular semi-flat Calabi-Yau metrics on the
//! two-sphere.
//!
//! Starting from a rational cubic differential with simple poles, the crates
//! here build a background metric adapted to the poles, solve the integrable
//! Liouville-type equation (Ţiţeica's equation) for the conformal factor by a
//! barrier-certified damped Newton exhaustion, and then interrogate the
//! resulting geometry: developing maps and affine holonomy around each
//! puncture, winding numbers of developed loops, decay rates, Monge-Ampère
//! (`det Hess = 1`) checks of the developed potential, a holomorphic-data
//! (Blaschke) engine that provides closed-form oracles near punctures, and
//! Green's-function identities used by the upper barrier.

pub mod blaschke;
pub mod cubic;
pub mod geometry;
pub mod greens;
pub mod linsolve;
pub mod poly;
pub mod holonomy;
pub mod mongeampere;
pub mod series;
pub mod titeica;
pub mod transport;
