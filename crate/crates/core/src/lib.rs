// SPDX-License-Identifier: Apache-2.0

//! Three-level fluorescence kinetics: photon-stream simulation of a single
//! emitter with a shelving level, g²(τ) estimation from Hanbury-Brown–Twiss
//! click streams, and inversion of fitted curves back to transition rates.

pub mod error;
pub mod estimation;
pub mod kinetics;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
pub use kinetics::{DerivedParams, DetectionEfficiency, Populations, PowerModel, RateConstants};
