// SPDX-License-Identifier: Apache-2.0

//! From normalized curves to rates: background correction, g² fits,
//! efficiency calibration, power regression and saturation fits.

mod background;
mod calibrate;
mod fit_g2;
mod lm;
mod power;
mod saturation;

pub use background::{background_correct, signal_fraction};
pub use calibrate::{calibrate_eta, rate_stderr, EtaCalibration, PowerPoint, MIN_CALIBRATION_POINTS};
pub use fit_g2::{fit_g2, guess_shape, FitOptions, FitResult, G2Shape, MIN_FIT_BINS};
pub use power::{extract_power_model, linear_fit, LinearFit, PowerModelFit};
pub use saturation::{
    fit_saturation, predict_saturation, SaturationFit, SaturationParam, SaturationPoint, MIN_SATURATION_POINTS,
};
