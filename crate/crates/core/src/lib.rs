//! Core algorithms for desk-scale heterogeneous inverse scattering.
//!
//! Everything in this crate is pure computation over heap-allocated grids:
//! seeded procedural field synthesis, mesh voxelization, low-rank tensor
//! fields, spherical-harmonic lighting, a differentiable single-scattering
//! ray-marcher with a Monte Carlo reference, a small reverse-mode autodiff
//! tape, the feed-forward reconstruction network, per-scene inverse
//! optimization, and evaluation metrics.
//!
//! The crate is `no_std`-compatible (`alloc` required). Builds must enable
//! either the default `std` feature or the `libm` feature for float
//! intrinsics.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("hscat-core needs float intrinsics: enable feature `std` or `libm`");

mod float;

pub mod autodiff;
pub mod geometry;
pub mod inverse_opt;
pub mod lighting;
pub mod metrics;
pub mod noise;
pub mod render;
pub mod rng;
pub mod tensois;
pub mod tensor;
