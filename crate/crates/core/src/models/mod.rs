//! Sensor models and analytic precision bounds.

pub mod bounds;
pub mod dolinar;
pub mod nv;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Node, Tape, Tensor};
use crate::error::Result;

pub use bounds::{dc_lower_bound, BoundSpec, Regime};
pub use dolinar::DolinarModel;
pub use nv::{NvDcModel, NvResource};

/// Discrete measurement outcome (±1 for the NV readout, photon counts for Dolinar).
pub type Outcome = i64;

/// A bounded continuous control exposed by a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    /// Column name used in CSV output.
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    /// Squash in log space, useful for controls spanning decades.
    #[serde(default)]
    pub log_scale: bool,
}

/// A simulated sensor: prior, likelihood, optional per-particle state, and resource cost.
///
/// Parameter tensors are N×d (one particle per row); states are N×s.
pub trait SensorModel: Send + Sync {
    fn name(&self) -> &'static str;

    fn param_dim(&self) -> usize;

    /// Admissible interval for each parameter axis.
    fn bounds(&self) -> Vec<(f64, f64)>;

    fn discrete_axes(&self) -> Vec<bool> {
        vec![false; self.param_dim()]
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn controls(&self) -> Vec<ControlSpec>;

    /// Number of measurement steps the model supports, if fixed.
    fn fixed_steps(&self) -> Option<usize> {
        None
    }

    /// Per-particle probe state before the first measurement. `None` for stateless models.
    fn initial_state(&self, _tape: &Tape, _params: Node) -> Result<Option<Node>> {
        Ok(None)
    }

    /// Likelihood of `outcome` for each particle row, as an N×1 node.
    fn likelihood(
        &self,
        tape: &Tape,
        params: Node,
        state: Option<Node>,
        control: Node,
        outcome: Outcome,
        step: usize,
    ) -> Result<Node>;

    /// State after observing `outcome`.
    fn next_state(
        &self,
        _tape: &Tape,
        _params: Node,
        state: Option<Node>,
        _control: Node,
        _outcome: Outcome,
        _step: usize,
    ) -> Result<Option<Node>> {
        Ok(state)
    }

    /// Enumerated outcome law for a single parameter point, used for sampling and enumeration.
    fn outcome_distribution(
        &self,
        params: &[f64],
        state: Option<&[f64]>,
        control: &[f64],
        step: usize,
    ) -> Result<Vec<(Outcome, f64)>>;

    /// Resource consumed by one measurement.
    fn resource(&self, control: &[f64], step: usize) -> f64;

    /// Analytic score ∂log p/∂θ as a d×1 node for a single parameter point,
    /// differentiable through `control`. `None` selects the finite-difference fallback.
    fn score(
        &self,
        _tape: &Tape,
        _params: &[f64],
        _control: Node,
        _outcome: Outcome,
        _step: usize,
    ) -> Result<Option<Node>> {
        Ok(None)
    }

    /// Model-specific agent features in [-1, 1].
    fn extra_features(&self, _particles: &Tensor, _weights: &Tensor, _states: Option<&Tensor>) -> Vec<f64> {
        Vec::new()
    }

    /// Names of the extra features, matching `extra_features`.
    fn extra_feature_names(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Draw an outcome by inverse CDF over an enumerated law.
pub fn sample_outcome(dist: &[(Outcome, f64)], u: f64) -> Outcome {
    let total: f64 = dist.iter().map(|(_, p)| p).sum();
    let target = u * total;
    let mut acc = 0.0;
    for &(y, p) in dist {
        acc += p;
        if target < acc {
            return y;
        }
    }
    dist.iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(y, _)| *y)
        .unwrap_or(dist[0].0)
}
