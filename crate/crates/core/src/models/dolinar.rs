//! Agnostic Dolinar receiver: discriminate the sign of a coherent state |±α⟩ of
//! unknown amplitude using `n` reference copies of |α⟩ and photon counting.
//!
//! Parameters are (sign, α). Stage i < n mixes the residual signal with a
//! reference on a beam splitter of angle θ_i and counts photons on one port;
//! the last step counts photons in the residual signal itself.

use rand::{Rng, RngCore};

use super::{ControlSpec, Outcome, SensorModel};
use crate::autodiff::{Node, Tape, Tensor};
use crate::error::{Error, Result};

pub const ALPHA_MIN: f64 = 0.05;
pub const ALPHA_MAX: f64 = 1.50;

#[derive(Clone, Debug, PartialEq)]
pub struct DolinarModel {
    n: usize,
}

impl DolinarModel {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("n", "need at least one reference state"));
        }
        Ok(Self { n })
    }

    pub fn references(&self) -> usize {
        self.n
    }

    fn stage_check(&self, step: usize) -> Result<()> {
        if step > self.n {
            return Err(Error::invalid(format!(
                "step {step} beyond the final measurement {}",
                self.n
            )));
        }
        Ok(())
    }

    /// Measured-port amplitude for every particle row.
    fn measured(&self, tape: &Tape, params: Node, state: Node, control: Node, step: usize) -> Result<Node> {
        self.stage_check(step)?;
        if step == self.n {
            return Ok(state);
        }
        let alpha = tape.select_cols(params, &[1])?;
        let theta = tape.element(control, 0, 0)?;
        let s = tape.sin(theta)?;
        let c = tape.cos(theta)?;
        let a = tape.mul(state, s)?;
        let b = tape.mul(alpha, c)?;
        Ok(tape.add(a, b)?)
    }
}

/// One beam-splitter stage: (measured amplitude, residual amplitude).
pub fn dolinar_step(residual: f64, alpha: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (residual * s + alpha * c, residual * c - alpha * s)
}

fn ln_factorial(y: u64) -> f64 {
    (2..=y).map(|k| (k as f64).ln()).sum()
}

pub fn poisson_pmf(y: u64, mean: f64) -> f64 {
    if mean == 0.0 {
        return if y == 0 { 1.0 } else { 0.0 };
    }
    (-mean + y as f64 * mean.ln() - ln_factorial(y)).exp()
}

/// Truncation point ceil(μ + 20·√(μ+1)).
pub fn count_cutoff(mean: f64) -> u64 {
    (mean + 20.0 * (mean + 1.0).sqrt()).ceil() as u64
}

/// Poisson law on 0..=cutoff with the tail folded into the last count.
pub fn truncated_poisson(mean: f64) -> Vec<(Outcome, f64)> {
    let cut = count_cutoff(mean);
    let mut out: Vec<(Outcome, f64)> = (0..cut).map(|y| (y as Outcome, poisson_pmf(y, mean))).collect();
    let head: f64 = out.iter().map(|(_, p)| p).sum();
    out.push((cut as Outcome, (1.0 - head).max(0.0)));
    out
}

fn poisson_node(tape: &Tape, amplitude: Node, count: Outcome) -> Result<Node> {
    if count < 0 {
        return Err(Error::invalid(format!("negative photon count {count}")));
    }
    let mean = tape.mul(amplitude, amplitude)?;
    let neg = tape.neg(mean)?;
    let e = tape.exp(neg)?;
    let pw = tape.powi(mean, count as i32)?;
    let p = tape.mul(e, pw)?;
    Ok(tape.scale(p, (-ln_factorial(count as u64)).exp())?)
}

impl SensorModel for DolinarModel {
    fn name(&self) -> &'static str {
        "dolinar"
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0), (ALPHA_MIN, ALPHA_MAX)]
    }

    fn discrete_axes(&self) -> Vec<bool> {
        vec![true, false]
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let alpha = ALPHA_MIN + (ALPHA_MAX - ALPHA_MIN) * rng.random::<f64>();
        vec![sign, alpha]
    }

    fn controls(&self) -> Vec<ControlSpec> {
        vec![ControlSpec {
            name: "Theta".into(),
            lo: 0.0,
            hi: std::f64::consts::PI,
            log_scale: false,
        }]
    }

    fn fixed_steps(&self) -> Option<usize> {
        Some(self.n + 1)
    }

    fn initial_state(&self, tape: &Tape, params: Node) -> Result<Option<Node>> {
        let sign = tape.select_cols(params, &[0])?;
        let alpha = tape.select_cols(params, &[1])?;
        Ok(Some(tape.mul(sign, alpha)?))
    }

    fn likelihood(
        &self,
        tape: &Tape,
        params: Node,
        state: Option<Node>,
        control: Node,
        outcome: Outcome,
        step: usize,
    ) -> Result<Node> {
        let state = state.ok_or_else(|| Error::invalid("Dolinar likelihood needs the residual state"))?;
        let m = self.measured(tape, params, state, control, step)?;
        poisson_node(tape, m, outcome)
    }

    fn next_state(
        &self,
        tape: &Tape,
        params: Node,
        state: Option<Node>,
        control: Node,
        _outcome: Outcome,
        step: usize,
    ) -> Result<Option<Node>> {
        self.stage_check(step)?;
        let state = state.ok_or_else(|| Error::invalid("Dolinar update needs the residual state"))?;
        if step == self.n {
            return Ok(Some(state));
        }
        let alpha = tape.select_cols(params, &[1])?;
        let theta = tape.element(control, 0, 0)?;
        let s = tape.sin(theta)?;
        let c = tape.cos(theta)?;
        let a = tape.mul(state, c)?;
        let b = tape.mul(alpha, s)?;
        Ok(Some(tape.sub(a, b)?))
    }

    fn outcome_distribution(
        &self,
        params: &[f64],
        state: Option<&[f64]>,
        control: &[f64],
        step: usize,
    ) -> Result<Vec<(Outcome, f64)>> {
        self.stage_check(step)?;
        let residual = state.map(|s| s[0]).unwrap_or(params[0] * params[1]);
        let m = if step == self.n {
            residual
        } else {
            dolinar_step(residual, params[1], control[0]).0
        };
        if !m.is_finite() {
            return Err(Error::invalid(format!("non-finite amplitude at step {step}")));
        }
        Ok(truncated_poisson(m * m))
    }

    fn resource(&self, _control: &[f64], _step: usize) -> f64 {
        1.0
    }

    fn extra_features(&self, _particles: &Tensor, weights: &Tensor, states: Option<&Tensor>) -> Vec<f64> {
        let Some(states) = states else {
            return vec![0.0];
        };
        let r: f64 = (0..weights.rows()).map(|j| weights.get(j, 0) * states.get(j, 0)).sum();
        let scale = ALPHA_MAX * ((self.n + 1) as f64).sqrt();
        vec![(r / scale).clamp(-1.0, 1.0)]
    }

    fn extra_feature_names(&self) -> Vec<String> {
        vec!["residual".into()]
    }
}
