//! Lower bounds on the frequency MSE for DC magnetometry with a uniform (0, 1) MHz prior.

use serde::{Deserialize, Serialize};

/// sup over x > 0 of x²e^{−2x}/(1 − e^{−2x}).
pub const MU: f64 = 0.1619;
/// Prior information term, μs².
pub const PRIOR_INFORMATION: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Resource is the number of measurements M.
    MeasurementLimited,
    /// Resource is the total evolution time T in μs.
    TimeLimited,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub regime: Regime,
    /// `None` for no dephasing.
    pub t2_star: Option<f64>,
}

/// One bit per binary measurement: 2^{−2(M+1)}/3.
pub fn bit_bound(m: f64) -> f64 {
    (-2.0 * (m + 1.0)).exp2() / 3.0
}

pub fn dc_lower_bound(spec: BoundSpec, resource: f64) -> f64 {
    match (spec.regime, spec.t2_star) {
        (Regime::MeasurementLimited, None) => bit_bound(resource),
        (Regime::TimeLimited, None) => 1.0 / (resource * resource + PRIOR_INFORMATION),
        (Regime::MeasurementLimited, Some(t2)) => {
            (1.0 / (MU * resource * t2 * t2 + PRIOR_INFORMATION)).max(bit_bound(resource))
        }
        (Regime::TimeLimited, Some(t2)) => 1.0 / (0.5 * resource * t2 + PRIOR_INFORMATION),
    }
}
