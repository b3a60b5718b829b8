//! Losses, the optimizer, and the outer training loop.

pub mod adam;
pub mod losses;

use std::time::Instant;

use log::{debug, warn};
use rayon::prelude::*;

pub use adam::Adam;
pub use losses::{
    batch_loss, check_psd, cumulative_loss, information_gain_epsilon, information_gain_loss, logarithmic_loss,
    modified_batch_loss, pointwise_loss, pointwise_value, LossKind, LossSpec, Normalization, Pointwise,
    SurrogateLoss,
};

use crate::agents::{Agent, AgentParameters};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fisher::cr_batch_loss;
use crate::models::SensorModel;
use crate::simulation::{run_batch, Batch, EpisodeRecord, SimulationConfig, TapeMode};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    /// I.
    pub steps: usize,
    /// α₀.
    pub learning_rate: f64,
    /// Batches averaged per update.
    pub accumulation: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 1e-2,
            accumulation: 1,
            clip: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    /// Rate used for this update; 0 when the update was rejected.
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: AgentParameters,
    pub history: Vec<HistoryRow>,
}

/// Loss of a simulated batch, including the Cramér–Rao kinds.
pub fn compute_loss(batch: &Batch, model: &dyn SensorModel, spec: &LossSpec) -> Result<SurrogateLoss> {
    if spec.is_fisher() {
        cr_batch_loss(batch, model, spec)
    } else {
        batch_loss(batch, spec)
    }
}

/// Σ_k ∂term_k/∂λ, reduced in episode order.
pub fn loss_gradient(records: &mut [EpisodeRecord], loss: &SurrogateLoss, params: &AgentParameters) -> Result<Vec<Tensor>> {
    let per_episode: Vec<Result<Option<Vec<Tensor>>>> = records
        .par_iter_mut()
        .zip(loss.terms.par_iter())
        .map(|(r, term)| match term {
            Some(t) => Ok(Some(r.tape.backward(*t, &r.agent_nodes)?.into_tensors())),
            None => Ok(None),
        })
        .collect();
    let mut total: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    for g in per_episode {
        if let Some(g) = g? {
            for (acc, gi) in total.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
        }
    }
    Ok(total)
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// One loss evaluation and gradient at the current parameters.
pub fn batch_gradient(
    model: &dyn SensorModel,
    params: &AgentParameters,
    sim: &SimulationConfig,
    spec: &LossSpec,
    seed: u64,
    batch_index: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let agent = Agent::Trainable(params.clone());
    let mut batch = run_batch(model, &agent, sim, seed, batch_index, TapeMode::Record)?;
    let loss = compute_loss(&batch, model, spec)?;
    let grads = loss_gradient(&mut batch.records, &loss, params)?;
    Ok((loss.value, grads))
}

/// I updates of simulate → loss → backward → Adam.
pub fn train(
    model: &dyn SensorModel,
    params: AgentParameters,
    sim: &SimulationConfig,
    spec: &LossSpec,
    cfg: &TrainingConfig,
    mut observer: impl FnMut(&HistoryRow),
) -> Result<Trained> {
    sim.validate()?;
    if cfg.accumulation == 0 {
        return Err(Error::config("accumulation", "must be at least 1"));
    }
    if let Some(c) = cfg.clip {
        if !(c > 0.0) {
            return Err(Error::config("clip", "must be positive"));
        }
    }
    let mut params = params;
    let mut adam = Adam::new(cfg.learning_rate, &params.tensors)?;
    let mut history = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        for sub in 0..cfg.accumulation {
            let index = ((step - 1) * cfg.accumulation + sub) as u64;
            let (l, g) = batch_gradient(model, &params, sim, spec, cfg.seed, index)?;
            loss += l / cfg.accumulation as f64;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(&gi.scale(1.0 / cfg.accumulation as f64));
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(c) = cfg.clip {
            clip(&mut grads, c);
        }
        let rate = match adam.step(&mut params.tensors, &grads) {
            Ok(r) => r,
            Err(e) => {
                warn!("update {step} rejected: {e}");
                0.0
            }
        };
        let row = HistoryRow {
            step,
            loss,
            learning_rate: rate,
            seconds: start.elapsed().as_secs_f64(),
        };
        debug!("step {step}: loss {loss:.6e}");
        observer(&row);
        history.push(row);
    }
    Ok(Trained { params, history })
}
