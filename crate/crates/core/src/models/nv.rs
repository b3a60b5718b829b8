//! Ramsey-type DC magnetometry with a single NV center.
//!
//! One measurement with evolution time τ yields ±1 with probability
//! ½ ± ½·e^{−τ/T₂*}·cos(ωτ). The frequency ω (MHz) has a uniform prior on (0, 1).

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{ControlSpec, Outcome, SensorModel};
use crate::autodiff::{Node, Tape, Tensor};
use crate::error::{Error, Result};

/// Which quantity counts as consumed resource.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NvResource {
    Measurements,
    EvolutionTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NvDcModel {
    t2_star: Option<f64>,
    tau_lo: f64,
    tau_hi: f64,
    resource: NvResource,
    log_scale: bool,
}

impl NvDcModel {
    /// `t2_star = None` means no dephasing.
    pub fn new(t2_star: Option<f64>, resource: NvResource) -> Result<Self> {
        if let Some(t) = t2_star {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::config("t2_star", "must be positive and finite, or omitted"));
            }
        }
        let (tau_lo, tau_hi) = Self::default_tau_bounds(t2_star);
        Ok(Self {
            t2_star,
            tau_lo,
            tau_hi,
            resource,
            log_scale: true,
        })
    }

    /// τ ∈ [0.01·s, 100·s] with s = min(T₂*, 100).
    pub fn default_tau_bounds(t2_star: Option<f64>) -> (f64, f64) {
        let s = t2_star.map_or(100.0, |t| t.min(100.0));
        (0.01 * s, 100.0 * s)
    }

    pub fn with_tau_bounds(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::config("tau_bounds", "need 0 < lo < hi < inf"));
        }
        self.tau_lo = lo;
        self.tau_hi = hi;
        Ok(self)
    }

    /// Squash the agent output linearly instead of in log space.
    pub fn with_linear_tau(mut self) -> Self {
        self.log_scale = false;
        self
    }

    pub fn t2_star(&self) -> Option<f64> {
        self.t2_star
    }

    pub fn tau_bounds(&self) -> (f64, f64) {
        (self.tau_lo, self.tau_hi)
    }

    pub fn resource_mode(&self) -> NvResource {
        self.resource
    }

    /// Contrast e^{−τ/T₂*}·y/2 as a 1×1 node.
    fn amplitude(&self, tape: &Tape, tau: Node, outcome: Outcome) -> Result<Node> {
        let half = 0.5 * outcome as f64;
        Ok(match self.t2_star {
            None => tape.constant(Tensor::scalar(half)),
            Some(t2) => {
                let e = tape.scale(tau, -1.0 / t2)?;
                let e = tape.exp(e)?;
                tape.scale(e, half)?
            }
        })
    }
}

fn check_outcome(outcome: Outcome) -> Result<()> {
    if outcome == 1 || outcome == -1 {
        Ok(())
    } else {
        Err(Error::invalid(format!("NV outcome must be +1 or -1, got {outcome}")))
    }
}

/// p(y | ω, τ, T₂*).
pub fn nv_likelihood(outcome: Outcome, tau: f64, omega: f64, t2_star: Option<f64>) -> f64 {
    let decay = t2_star.map_or(1.0, |t| (-tau / t).exp());
    0.5 + 0.5 * outcome as f64 * decay * (omega * tau).cos()
}

/// ∂p(y | ω, τ, T₂*)/∂ω.
pub fn nv_likelihood_domega(outcome: Outcome, tau: f64, omega: f64, t2_star: Option<f64>) -> f64 {
    let decay = t2_star.map_or(1.0, |t| (-tau / t).exp());
    -0.5 * outcome as f64 * decay * tau * (omega * tau).sin()
}

/// ∂log p/∂ω. Rejected when p is exactly 0 or 1.
pub fn nv_score(outcome: Outcome, tau: f64, omega: f64, t2_star: Option<f64>) -> Result<f64> {
    let p = nv_likelihood(outcome, tau, omega, t2_star);
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::invalid(format!(
            "score undefined: p = {p} at omega = {omega}, tau = {tau}"
        )));
    }
    Ok(nv_likelihood_domega(outcome, tau, omega, t2_star) / p)
}

/// Closed-form Fisher information of one measurement about ω.
pub fn nv_fisher_information(omega: f64, tau: f64, t2_star: Option<f64>) -> f64 {
    match t2_star {
        None => tau * tau,
        Some(t2) => {
            let d2 = (-2.0 * tau / t2).exp();
            let c = (omega * tau / 2.0).cos().powi(2);
            tau * tau * d2 * c * (1.0 - c) / (0.25 - d2 * (c - 0.5).powi(2))
        }
    }
}

impl SensorModel for NvDcModel {
    fn name(&self) -> &'static str {
        "nv_dc"
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0)]
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random::<f64>()]
    }

    fn controls(&self) -> Vec<ControlSpec> {
        vec![ControlSpec {
            name: "Tau".into(),
            lo: self.tau_lo,
            hi: self.tau_hi,
            log_scale: self.log_scale,
        }]
    }

    fn likelihood(
        &self,
        tape: &Tape,
        params: Node,
        _state: Option<Node>,
        control: Node,
        outcome: Outcome,
        _step: usize,
    ) -> Result<Node> {
        check_outcome(outcome)?;
        let tau = tape.element(control, 0, 0)?;
        let phase = tape.mul(params, tau)?;
        let c = tape.cos(phase)?;
        let amp = self.amplitude(tape, tau, outcome)?;
        let p = tape.mul(c, amp)?;
        Ok(tape.offset(p, 0.5)?)
    }

    fn outcome_distribution(
        &self,
        params: &[f64],
        _state: Option<&[f64]>,
        control: &[f64],
        _step: usize,
    ) -> Result<Vec<(Outcome, f64)>> {
        let (omega, tau) = (params[0], control[0]);
        Ok(vec![
            (1, nv_likelihood(1, tau, omega, self.t2_star)),
            (-1, nv_likelihood(-1, tau, omega, self.t2_star)),
        ])
    }

    fn resource(&self, control: &[f64], _step: usize) -> f64 {
        match self.resource {
            NvResource::Measurements => 1.0,
            NvResource::EvolutionTime => control[0],
        }
    }

    fn score(
        &self,
        tape: &Tape,
        params: &[f64],
        control: Node,
        outcome: Outcome,
        _step: usize,
    ) -> Result<Option<Node>> {
        check_outcome(outcome)?;
        let omega = params[0];
        let tau = tape.element(control, 0, 0)?;
        let tau_v = tape.item(tau);
        let p_v = nv_likelihood(outcome, tau_v, omega, self.t2_star);
        if p_v <= 0.0 || p_v >= 1.0 {
            return Err(Error::invalid(format!(
                "score undefined: p = {p_v} at omega = {omega}, tau = {tau_v}"
            )));
        }
        let phase = tape.scale(tau, omega)?;
        let amp = self.amplitude(tape, tau, outcome)?;
        let p = {
            let c = tape.cos(phase)?;
            let m = tape.mul(c, amp)?;
            tape.offset(m, 0.5)?
        };
        // ∂p/∂ω = −amp·τ·sin(ωτ)
        let s = tape.sin(phase)?;
        let ts = tape.mul(tau, s)?;
        let dp = tape.mul(ts, amp)?;
        let dp = tape.neg(dp)?;
        Ok(Some(tape.div(dp, p)?))
    }
}
