//! Numerical engine for the stochastic heat equation on [0,1] with Dirichlet
//! boundary conditions and multiplicative space-time white noise.

// `!(a < b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod density;
pub mod ensemble;
pub mod heat_kernel;
pub mod malliavin;
pub mod noise;
pub mod quadrature;
pub mod solver;
