//! Batch losses whose gradients include the log-likelihood (score-function) terms.
//!
//! Every loss is assembled per episode: the term for episode k lives on that
//! episode's tape, with batch-level quantities (means, baselines, normalizers)
//! entering as forward-value constants. Summing the per-episode gradients gives
//! the gradient of the full surrogate.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Node, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{dc_lower_bound, BoundSpec};
use crate::simulation::{Batch, EpisodeRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Final-step MSE.
    Mse,
    /// Final-step error probability.
    Discrimination,
    Cumulative,
    Logarithmic,
    InformationGain,
    /// tr(G·F⁻¹).
    CramerRao,
    /// log tr(G·F⁻¹).
    LogCramerRao,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pointwise {
    /// tr[G·(θ̂−θ)(θ̂−θ)ᵀ].
    Mse,
    /// 1 − δ(θ̂, θ) on the axes selected by G.
    Discrimination,
}

pub type NormalizationFn = dyn Fn(&[f64], usize, f64) -> f64 + Send + Sync;

/// η(θ, t, R_t) dividing the per-step losses of the cumulative loss.
#[derive(Clone, Default)]
pub enum Normalization {
    #[default]
    None,
    /// The DC magnetometry lower bound at the consumed resource.
    DcBound(BoundSpec),
    Custom(Arc<NormalizationFn>),
}

impl fmt::Debug for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Normalization::None => f.write_str("None"),
            Normalization::DcBound(b) => write!(f, "DcBound({b:?})"),
            Normalization::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Normalization {
    fn eval(&self, theta: &[f64], t: usize, resources: f64) -> Result<f64> {
        let eta = match self {
            Normalization::None => return Ok(1.0),
            Normalization::DcBound(spec) => dc_lower_bound(*spec, resources),
            Normalization::Custom(f) => f(theta, t, resources),
        };
        if !(eta != 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("loss normalization is {eta} at step {t}")));
        }
        Ok(eta)
    }
}

#[derive(Clone, Debug)]
pub struct LossSpec {
    pub kind: LossKind,
    pub pointwise: Pointwise,
    /// G, d×d positive semidefinite.
    pub weights: Tensor,
    pub normalization: Normalization,
    pub baseline: bool,
    /// Include the sg(ℓ)·log p terms. Disabling them gives a biased gradient.
    pub log_likelihood: bool,
}

/// Reject non-symmetric or indefinite weight matrices.
pub fn check_psd(g: &Tensor) -> Result<()> {
    let (r, c) = g.shape();
    if r != c {
        return Err(Error::config("loss.weights", format!("G must be square, got {r}×{c}")));
    }
    let scale = g.data().iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    for i in 0..r {
        for j in 0..i {
            if (g.get(i, j) - g.get(j, i)).abs() > 1e-12 * scale {
                return Err(Error::config("loss.weights", "G must be symmetric"));
            }
        }
    }
    if !g.is_finite() {
        return Err(Error::config("loss.weights", "G has non-finite entries"));
    }
    let m = DMatrix::from_row_slice(r, c, g.data());
    let min = SymmetricEigen::new(m).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-12 * scale {
        return Err(Error::config("loss.weights", format!("G is not positive semidefinite (eigenvalue {min})")));
    }
    Ok(())
}

impl LossSpec {
    pub fn new(kind: LossKind, weights: Tensor) -> Result<Self> {
        check_psd(&weights)?;
        Ok(Self {
            kind,
            pointwise: match kind {
                LossKind::Discrimination => Pointwise::Discrimination,
                _ => Pointwise::Mse,
            },
            weights,
            normalization: Normalization::None,
            baseline: false,
            log_likelihood: true,
        })
    }

    /// G = I_d.
    pub fn identity(kind: LossKind, d: usize) -> Result<Self> {
        Self::new(kind, Tensor::identity(d))
    }

    pub fn with_pointwise(mut self, p: Pointwise) -> Self {
        self.pointwise = p;
        self
    }

    pub fn with_baseline(mut self, on: bool) -> Self {
        self.baseline = on;
        self
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = n;
        self
    }

    pub fn with_log_likelihood(mut self, on: bool) -> Self {
        self.log_likelihood = on;
        self
    }

    pub fn is_fisher(&self) -> bool {
        matches!(self.kind, LossKind::CramerRao | LossKind::LogCramerRao)
    }
}

/// ℓ(θ̂, θ) as a 1×1 node.
pub fn pointwise_loss(tape: &Tape, kind: Pointwise, g: &Tensor, estimate: Node, theta: &[f64]) -> Result<Node> {
    match kind {
        Pointwise::Mse => {
            let truth = tape.constant(Tensor::row(theta.to_vec()));
            let diff = tape.sub(estimate, truth)?;
            let gm = tape.constant(g.clone());
            let left = tape.matmul(diff, gm)?;
            let dt = tape.transpose(diff)?;
            Ok(tape.matmul(left, dt)?)
        }
        Pointwise::Discrimination => {
            let v = pointwise_value(kind, g, &tape.value(estimate).data().to_vec(), theta);
            Ok(tape.constant(Tensor::scalar(v)))
        }
    }
}

/// Forward value of ℓ(θ̂, θ).
pub fn pointwise_value(kind: Pointwise, g: &Tensor, estimate: &[f64], theta: &[f64]) -> f64 {
    let d = theta.len();
    match kind {
        Pointwise::Mse => {
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    acc += (estimate[i] - theta[i]) * g.get(i, j) * (estimate[j] - theta[j]);
                }
            }
            acc
        }
        Pointwise::Discrimination => {
            let wrong = (0..d).any(|i| g.get(i, i) > 0.0 && (estimate[i] - theta[i]).abs() > 1e-9);
            if wrong {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// A loss split into per-episode gradient-carrying nodes.
#[derive(Clone, Debug)]
pub struct SurrogateLoss {
    /// Forward value of the loss itself.
    pub value: f64,
    /// Sum of the forward values of `terms`.
    pub surrogate: f64,
    /// Node on each episode's tape, `None` for episodes that carry no term.
    pub terms: Vec<Option<Node>>,
}

/// Per-episode coefficients on loss nodes and log-likelihood prefixes, keyed by step.
#[derive(Default)]
struct Coefficients {
    loss: BTreeMap<usize, f64>,
    log_likelihood: BTreeMap<usize, f64>,
}

impl Coefficients {
    fn add_loss(&mut self, step: usize, a: f64) {
        *self.loss.entry(step).or_insert(0.0) += a;
    }

    fn add_log_likelihood(&mut self, step: usize, b: f64) {
        *self.log_likelihood.entry(step).or_insert(0.0) += b;
    }
}

fn assemble(record: &EpisodeRecord, c: &Coefficients, spec: &LossSpec) -> Result<Option<Node>> {
    let tape = &record.tape;
    let mut acc: Option<Node> = None;
    let mut push = |n: Node| -> Result<()> {
        acc = Some(match acc {
            Some(a) => tape.add(a, n)?,
            None => n,
        });
        Ok(())
    };
    for (&s, &a) in &c.loss {
        if a == 0.0 {
            continue;
        }
        let l = pointwise_loss(tape, spec.pointwise, &spec.weights, record.estimator_at(s), &record.theta)?;
        push(tape.scale(l, a)?)?;
    }
    if spec.log_likelihood {
        for (&s, &b) in &c.log_likelihood {
            if b == 0.0 {
                continue;
            }
            if let Some(ll) = record.log_likelihood_at(s) {
                push(tape.scale(ll, b)?)?;
            }
        }
    }
    Ok(acc)
}

fn finish(records: &[EpisodeRecord], coeffs: Vec<Coefficients>, spec: &LossSpec, value: f64) -> Result<SurrogateLoss> {
    let mut terms = Vec::with_capacity(records.len());
    let mut surrogate = 0.0;
    for (r, c) in records.iter().zip(&coeffs) {
        let t = assemble(r, c, spec)?;
        if let Some(n) = t {
            surrogate += r.tape.item(n);
        }
        terms.push(t);
    }
    Ok(SurrogateLoss {
        value,
        surrogate,
        terms,
    })
}

fn step_value(r: &EpisodeRecord, spec: &LossSpec, t: usize) -> f64 {
    pointwise_value(spec.pointwise, &spec.weights, r.estimate_at(t), &r.theta)
}

/// (1/B′)Σ_k w_k·{ℓ_k + sg(ℓ_k − 𝓑)·L_k} over the terminated episodes.
pub fn modified_batch_loss(records: &[EpisodeRecord], spec: &LossSpec) -> Result<SurrogateLoss> {
    let done: Vec<usize> = (0..records.len()).filter(|&k| records[k].terminated_at.is_some()).collect();
    if done.is_empty() {
        return Err(Error::invalid("no terminated episodes to average the loss over"));
    }
    let b = done.len() as f64;
    let values: Vec<f64> = records
        .iter()
        .map(|r| step_value(r, spec, r.steps.len()))
        .collect();
    let value = done.iter().map(|&k| records[k].weight * values[k]).sum::<f64>() / b;
    let baseline = if spec.baseline { value } else { 0.0 };
    let mut coeffs: Vec<Coefficients> = records.iter().map(|_| Coefficients::default()).collect();
    for &k in &done {
        let r = &records[k];
        let s = r.steps.len();
        coeffs[k].add_loss(s, r.weight / b);
        coeffs[k].add_log_likelihood(s, r.weight / b * (values[k] - baseline));
    }
    finish(records, coeffs, spec, value)
}

/// Per-step values ℓ_{k,t}/η for t = 1..=M′, indexed [t−1][k].
fn step_table(records: &[EpisodeRecord], m: usize, spec: &LossSpec, normalize: bool) -> Result<Vec<Vec<f64>>> {
    (1..=m)
        .map(|t| {
            records
                .iter()
                .map(|r| {
                    let l = step_value(r, spec, t);
                    if normalize {
                        Ok(l / spec.normalization.eval(&r.theta, t, r.resources_at(t))?)
                    } else {
                        Ok(l)
                    }
                })
                .collect()
        })
        .collect()
}

fn weighted_mean(records: &[EpisodeRecord], values: &[f64]) -> f64 {
    records.iter().zip(values).map(|(r, v)| r.weight * v).sum::<f64>() / records.len() as f64
}

fn check_batch(records: &[EpisodeRecord], m: usize) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if m == 0 {
        return Err(Error::invalid("per-step losses need at least one measurement"));
    }
    Ok(())
}

/// (1/(M′B))Σ_t Σ_k ℓ_{k,t}/η, paired with the prefix log-likelihood of each step.
pub fn cumulative_loss(records: &[EpisodeRecord], realized_steps: usize, spec: &LossSpec) -> Result<SurrogateLoss> {
    check_batch(records, realized_steps)?;
    let m = realized_steps;
    let table = step_table(records, m, spec, true)?;
    let b = records.len() as f64;
    let mut coeffs: Vec<Coefficients> = records.iter().map(|_| Coefficients::default()).collect();
    let mut value = 0.0;
    for (ti, row) in table.iter().enumerate() {
        let t = ti + 1;
        let mean = weighted_mean(records, row);
        value += mean / m as f64;
        let baseline = if spec.baseline { mean } else { 0.0 };
        for (k, r) in records.iter().enumerate() {
            let s = t.min(r.steps.len());
            let eta = spec.normalization.eval(&r.theta, t, r.resources_at(t))?;
            let w = r.weight / (m as f64 * b);
            coeffs[k].add_loss(s, w / eta);
            coeffs[k].add_log_likelihood(s, w * (row[k] - baseline));
        }
    }
    finish(records, coeffs, spec, value)
}

/// Shared gradient of the logarithmic and information-gain losses:
/// (1/M′)Σ_t dS̃_t / S_t with S_t the weighted batch mean at step t.
fn log_ratio_coefficients(records: &[EpisodeRecord], table: &[Vec<f64>], spec: &LossSpec) -> Result<Vec<Coefficients>> {
    let m = table.len() as f64;
    let b = records.len() as f64;
    let mut coeffs: Vec<Coefficients> = records.iter().map(|_| Coefficients::default()).collect();
    for (ti, row) in table.iter().enumerate() {
        let t = ti + 1;
        let mean = weighted_mean(records, row);
        if !(mean > 0.0) {
            return Err(Error::invalid(format!("batch-mean loss is {mean} at step {t}")));
        }
        let baseline = if spec.baseline { mean } else { 0.0 };
        for (k, r) in records.iter().enumerate() {
            let s = t.min(r.steps.len());
            let w = r.weight / (m * b * mean);
            coeffs[k].add_loss(s, w);
            coeffs[k].add_log_likelihood(s, w * (row[k] - baseline));
        }
    }
    Ok(coeffs)
}

/// (1/M′)Σ_t log[(1/B)Σ_k ℓ_{k,t}].
pub fn logarithmic_loss(records: &[EpisodeRecord], realized_steps: usize, spec: &LossSpec) -> Result<SurrogateLoss> {
    check_batch(records, realized_steps)?;
    let table = step_table(records, realized_steps, spec, false)?;
    let coeffs = log_ratio_coefficients(records, &table, spec)?;
    let value = table.iter().map(|row| weighted_mean(records, row).ln()).sum::<f64>() / realized_steps as f64;
    finish(records, coeffs, spec, value)
}

/// (1/M′)Σ_t log[S_t / sg(S_{t−1} + ε)] with ε = 1e-12·S_0.
pub fn information_gain_loss(records: &[EpisodeRecord], realized_steps: usize, spec: &LossSpec) -> Result<SurrogateLoss> {
    check_batch(records, realized_steps)?;
    let table = step_table(records, realized_steps, spec, false)?;
    let coeffs = log_ratio_coefficients(records, &table, spec)?;
    let prior: Vec<f64> = records.iter().map(|r| step_value(r, spec, 0)).collect();
    let s0 = weighted_mean(records, &prior);
    let eps = information_gain_epsilon(s0);
    let mut prev = s0;
    let mut value = 0.0;
    for row in &table {
        let s = weighted_mean(records, row);
        value += (s / (prev + eps)).ln();
        prev = s;
    }
    finish(records, coeffs, spec, value / realized_steps as f64)
}

/// Regularizer of the information-gain denominators.
pub fn information_gain_epsilon(first: f64) -> f64 {
    let eps = 1e-12 * first;
    if eps > 0.0 {
        eps
    } else {
        f64::MIN_POSITIVE
    }
}

/// Dispatch the non-Fisher losses.
pub fn batch_loss(batch: &Batch, spec: &LossSpec) -> Result<SurrogateLoss> {
    let records = &batch.records;
    let m = batch.realized_steps;
    match spec.kind {
        LossKind::Mse | LossKind::Discrimination => modified_batch_loss(records, spec),
        LossKind::Cumulative => cumulative_loss(records, m, spec),
        LossKind::Logarithmic => logarithmic_loss(records, m, spec),
        LossKind::InformationGain => information_gain_loss(records, m, spec),
        LossKind::CramerRao | LossKind::LogCramerRao => {
            Err(Error::invalid("Cramér–Rao losses need the model; use fisher::cr_batch_loss"))
        }
    }
}
