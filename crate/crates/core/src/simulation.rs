//! The measurement loop: agent → measurement → Bayes update, run in lockstep over a batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{pgh_control, sigma_inverse_control, Agent, AgentParameters, BoundAgent};
use crate::autodiff::{Node, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{sample_outcome, Outcome, SensorModel};
use crate::particle_filter::{
    bayes_update, estimator, init_ensemble, moments, needs_resampling, resample, ParticleEnsemble,
    ResamplingConfig, StateEnsemble,
};

/// Tolerance for likelihood values slightly outside [0, 1] from rounding.
const LIKELIHOOD_SLACK: f64 = 1e-12;

fn default_nu() -> f64 {
    0.98
}

/// Batch-level simulation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// N.
    pub particles: usize,
    /// B.
    pub batch_size: usize,
    /// M_max.
    pub max_steps: usize,
    /// R_max; `None` leaves resources unbounded.
    #[serde(default)]
    pub max_resources: Option<f64>,
    /// Fraction of the batch that must terminate before the loop stops.
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default)]
    pub resampling: ResamplingConfig,
    /// Weight of the uniform law mixed into outcome sampling. Zero samples from the model.
    #[serde(default)]
    pub outcome_mixing: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            particles: 480,
            batch_size: 128,
            max_steps: 20,
            max_resources: None,
            nu: default_nu(),
            resampling: ResamplingConfig::default(),
            outcome_mixing: 0.0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::config("particles", "need at least two particles"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::config("nu", "must lie in (0, 1]"));
        }
        if let Some(r) = self.max_resources {
            if !(r > 0.0) {
                return Err(Error::config("max_resources", "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.outcome_mixing) {
            return Err(Error::config("outcome_mixing", "must lie in [0, 1)"));
        }
        self.resampling.validate()
    }

    /// Step limit after applying the model's own horizon.
    pub fn steps_for(&self, model: &dyn SensorModel) -> usize {
        model.fixed_steps().map_or(self.max_steps, |m| m.min(self.max_steps))
    }

    /// ⌈νB⌉.
    pub fn quota(&self, batch: usize) -> usize {
        ((self.nu * batch as f64).ceil() as usize).clamp(1, batch)
    }
}

/// Whether episode tapes record the graph for differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeMode {
    Record,
    Forward,
}

/// Optional overrides for one episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodePlan {
    /// True parameters; drawn from the prior when absent.
    pub theta: Option<Vec<f64>>,
    /// Outcomes to impose instead of sampling.
    pub outcomes: Option<Vec<Outcome>>,
    /// Importance weight; 1 when absent.
    pub weight: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    /// c×1.
    pub control: Node,
    pub control_values: Vec<f64>,
    pub outcome: Outcome,
    /// r_t.
    pub resource: f64,
    /// R_t after this measurement.
    pub cumulative: f64,
    /// 1×d.
    pub estimator: Node,
    pub estimate: Vec<f64>,
    /// Σ_{s≤t} log p over λ-dependent outcome laws; `None` when no such term exists yet.
    pub log_likelihood: Option<Node>,
}

/// One simulated estimation, with its tape.
pub struct EpisodeRecord {
    pub tape: Tape,
    /// Agent variables on `tape`, aligned with the parameter tensors.
    pub agent_nodes: Vec<Node>,
    pub theta: Vec<f64>,
    pub prior_estimator: Node,
    pub prior_estimate: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Number of measurements at termination.
    pub terminated_at: Option<usize>,
    /// Importance weight of the episode within batch means.
    pub weight: f64,
}

impl EpisodeRecord {
    /// Estimator node after `t` measurements, frozen past the last executed one.
    pub fn estimator_at(&self, t: usize) -> Node {
        match t.min(self.steps.len()) {
            0 => self.prior_estimator,
            s => self.steps[s - 1].estimator,
        }
    }

    pub fn estimate_at(&self, t: usize) -> &[f64] {
        match t.min(self.steps.len()) {
            0 => &self.prior_estimate,
            s => &self.steps[s - 1].estimate,
        }
    }

    /// Prefix log-likelihood after `t` measurements, frozen past the end.
    pub fn log_likelihood_at(&self, t: usize) -> Option<Node> {
        match t.min(self.steps.len()) {
            0 => None,
            s => self.steps[s - 1].log_likelihood,
        }
    }

    pub fn resources_at(&self, t: usize) -> f64 {
        match t.min(self.steps.len()) {
            0 => 0.0,
            s => self.steps[s - 1].cumulative,
        }
    }

    pub fn final_estimate(&self) -> &[f64] {
        self.estimate_at(self.steps.len())
    }

    pub fn final_log_likelihood(&self) -> Option<Node> {
        self.log_likelihood_at(self.steps.len())
    }
}

/// Forward values of one step, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSummary {
    pub control: Vec<f64>,
    pub outcome: Outcome,
    pub resource: f64,
    pub cumulative: f64,
    pub estimate: Vec<f64>,
}

/// Forward values of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub theta: Vec<f64>,
    pub prior_estimate: Vec<f64>,
    pub steps: Vec<StepSummary>,
    pub terminated_at: Option<usize>,
}

impl EpisodeSummary {
    pub fn final_estimate(&self) -> &[f64] {
        self.steps.last().map_or(&self.prior_estimate, |s| &s.estimate)
    }
}

impl EpisodeRecord {
    pub fn summarize(&self) -> EpisodeSummary {
        EpisodeSummary {
            theta: self.theta.clone(),
            prior_estimate: self.prior_estimate.clone(),
            steps: self
                .steps
                .iter()
                .map(|s| StepSummary {
                    control: s.control_values.clone(),
                    outcome: s.outcome,
                    resource: s.resource,
                    cumulative: s.cumulative,
                    estimate: s.estimate.clone(),
                })
                .collect(),
            terminated_at: self.terminated_at,
        }
    }
}

/// Records of one batch and the realized horizon M′.
pub struct Batch {
    pub records: Vec<EpisodeRecord>,
    pub realized_steps: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child stream for episode `episode` of batch `batch` under `seed`.
pub fn episode_rng(seed: u64, batch: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(batch)));
    rng.set_stream(episode);
    rng
}

fn half_width((lo, hi): (f64, f64)) -> (f64, f64) {
    (0.5 * (lo + hi), 0.5 * (hi - lo))
}

/// Agent features from forward values, each in [-1, 1].
pub fn summary_features(
    tape: &Tape,
    e: &ParticleEnsemble,
    states: Option<Node>,
    resources: f64,
    t: usize,
    model: &dyn SensorModel,
    cfg: &SimulationConfig,
) -> Vec<f64> {
    let (m, cov) = moments(tape, e);
    let mut out = Vec::with_capacity(2 * m.len() + 3);
    for (i, &mi) in m.iter().enumerate() {
        let (c, h) = half_width(e.bounds[i]);
        out.push(((mi - c) / h).clamp(-1.0, 1.0));
    }
    for (i, b) in e.bounds.iter().enumerate() {
        let (_, h) = half_width(*b);
        out.push((cov.get(i, i).max(0.0).sqrt() / h).clamp(0.0, 1.0));
    }
    out.push(cfg.max_resources.map_or(0.0, |r| (resources / r).clamp(0.0, 1.0)));
    out.push(if cfg.max_steps == 0 {
        0.0
    } else {
        (t as f64 / cfg.max_steps as f64).min(1.0)
    });
    let p = tape.value(e.particles);
    let w = tape.value(e.weights);
    let s = states.map(|n| tape.value_cloned(n));
    out.extend(model.extra_features(&p, &w, s.as_ref()));
    out
}

/// Feature vector as a constant column, so no gradient reaches the posterior through it.
pub fn summary_input(
    tape: &Tape,
    e: &ParticleEnsemble,
    states: Option<Node>,
    resources: f64,
    t: usize,
    model: &dyn SensorModel,
    cfg: &SimulationConfig,
) -> Node {
    tape.constant(Tensor::column(summary_features(tape, e, states, resources, t, model, cfg)))
}

/// Length of the agent input for `model`.
pub fn input_dim(model: &dyn SensorModel) -> usize {
    2 * model.param_dim() + 2 + model.extra_feature_names().len()
}

struct Pending {
    control: Node,
    control_values: Vec<f64>,
    outcome: Outcome,
    resource: f64,
}

struct Live<'a> {
    tape: Tape,
    rng: ChaCha8Rng,
    bound: Option<BoundAgent<'a>>,
    theta: Vec<f64>,
    theta_node: Node,
    true_state: Option<Node>,
    ensemble: ParticleEnsemble,
    states: StateEnsemble,
    resources: f64,
    log_likelihood: Option<Node>,
    prior_estimator: Node,
    prior_estimate: Vec<f64>,
    steps: Vec<StepRecord>,
    terminated_at: Option<usize>,
    script: Option<Vec<Outcome>>,
    weight: f64,
    pending: Option<Pending>,
    wants_resampling: bool,
}

impl<'a> Live<'a> {
    fn start(
        model: &dyn SensorModel,
        params: Option<&'a AgentParameters>,
        cfg: &SimulationConfig,
        plan: EpisodePlan,
        mut rng: ChaCha8Rng,
        mode: TapeMode,
    ) -> Result<Self> {
        let tape = match mode {
            TapeMode::Record => Tape::new(),
            TapeMode::Forward => Tape::no_grad(),
        };
        let bound = params.map(|p| p.bind(&tape));
        let theta = match plan.theta {
            Some(t) if t.len() == model.param_dim() => t,
            Some(t) => {
                return Err(Error::invalid(format!(
                    "true parameters have length {}, model expects {}",
                    t.len(),
                    model.param_dim()
                )))
            }
            None => model.sample_prior(&mut rng),
        };
        let theta_node = tape.constant(Tensor::row(theta.clone()));
        let true_state = model.initial_state(&tape, theta_node)?;
        let ensemble = init_ensemble(&tape, model, cfg.particles, &mut rng)?;
        let states = StateEnsemble {
            states: model.initial_state(&tape, ensemble.particles)?,
            trajectory: Vec::new(),
        };
        let prior_estimator = estimator(&tape, &ensemble)?;
        let prior_estimate = tape.value_cloned(prior_estimator).into_data();
        Ok(Self {
            tape,
            rng,
            bound,
            theta,
            theta_node,
            true_state,
            ensemble,
            states,
            resources: 0.0,
            log_likelihood: None,
            prior_estimator,
            prior_estimate,
            steps: Vec::new(),
            terminated_at: None,
            script: plan.outcomes,
            weight: plan.weight.unwrap_or(1.0),
            pending: None,
            wants_resampling: false,
        })
    }

    fn accumulate(&mut self, term: Node) -> Result<()> {
        self.log_likelihood = Some(match self.log_likelihood {
            Some(acc) => self.tape.add(acc, term)?,
            None => term,
        });
        Ok(())
    }

    fn control(&mut self, model: &dyn SensorModel, agent: &Agent, cfg: &SimulationConfig, t: usize) -> Result<(Node, Option<Node>)> {
        let tape = &self.tape;
        Ok(match agent {
            Agent::Trainable(_) => {
                let bound = self.bound.as_ref().expect("trainable agent is bound");
                let input = summary_input(tape, &self.ensemble, self.states.states, self.resources, t, model, cfg);
                let out = bound.act(tape, input, t, &mut self.rng)?;
                (out.control, out.log_prob)
            }
            Agent::Pgh => {
                let tau = pgh_control(tape, &self.ensemble, &mut self.rng)?;
                (tape.constant(Tensor::scalar(tau)), None)
            }
            Agent::SigmaInverse { t2_star, max_tau } => {
                let tau = sigma_inverse_control(tape, &self.ensemble, *t2_star, *max_tau);
                (tape.constant(Tensor::scalar(tau)), None)
            }
            Agent::Constant(values) => (tape.constant(Tensor::column(values.clone())), None),
        })
    }

    /// Control, outcome, Bayes update and state propagation for step `t`.
    fn measure(&mut self, model: &dyn SensorModel, agent: &Agent, cfg: &SimulationConfig, t: usize) -> Result<()> {
        let (control, log_prob) = self.control(model, agent, cfg, t)?;
        let control_values = self.tape.value_cloned(control).into_data();
        if let Some(&bad) = control_values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteControl { step: t, value: bad });
        }

        let true_state = self.true_state.map(|s| self.tape.value_cloned(s).into_data());
        let dist = model.outcome_distribution(&self.theta, true_state.as_deref(), &control_values, t)?;
        if let Some(&(_, p)) = dist
            .iter()
            .find(|(_, p)| !(-LIKELIHOOD_SLACK..=1.0 + LIKELIHOOD_SLACK).contains(p))
        {
            return Err(Error::InvalidLikelihood { step: t, value: p });
        }
        let mut ratio = 1.0;
        let outcome = match &self.script {
            Some(script) => *script
                .get(t)
                .ok_or_else(|| Error::invalid(format!("outcome script ends before step {t}")))?,
            None if cfg.outcome_mixing > 0.0 => {
                let m = cfg.outcome_mixing;
                let uniform = 1.0 / dist.len() as f64;
                let mixed: Vec<(Outcome, f64)> = dist.iter().map(|&(y, p)| (y, (1.0 - m) * p + m * uniform)).collect();
                let y = sample_outcome(&mixed, self.rng.random::<f64>());
                let (p, q) = dist
                    .iter()
                    .zip(&mixed)
                    .find(|((z, _), _)| *z == y)
                    .map(|((_, p), (_, q))| (*p, *q))
                    .unwrap_or((0.0, 0.0));
                if !(q > 0.0) {
                    return Err(Error::ImpossibleOutcome { step: t, outcome: y });
                }
                ratio = p / q;
                y
            }
            None => sample_outcome(&dist, self.rng.random::<f64>()),
        };
        self.weight *= ratio;

        let p_true = model.likelihood(&self.tape, self.theta_node, self.true_state, control, outcome, t)?;
        let pv = self.tape.item(p_true);
        if pv > 1.0 + LIKELIHOOD_SLACK || pv.is_nan() {
            return Err(Error::InvalidLikelihood { step: t, value: pv });
        }
        if !(pv > 0.0) {
            return Err(Error::ImpossibleOutcome { step: t, outcome });
        }
        if self.tape.requires_grad(p_true) {
            let lp = self.tape.log(p_true)?;
            self.accumulate(lp)?;
        }
        if let Some(lp) = log_prob {
            self.accumulate(lp)?;
        }

        let lik = model.likelihood(&self.tape, self.ensemble.particles, self.states.states, control, outcome, t)?;
        if let Some(&bad) = self
            .tape
            .value(lik)
            .data()
            .iter()
            .find(|p| !(-LIKELIHOOD_SLACK..=1.0 + LIKELIHOOD_SLACK).contains(*p))
        {
            return Err(Error::InvalidLikelihood { step: t, value: bad });
        }
        self.ensemble = match bayes_update(&self.tape, &self.ensemble, lik) {
            Ok(e) => e,
            Err(Error::Invalid(_)) => return Err(Error::ImpossibleOutcome { step: t, outcome }),
            Err(e) => return Err(e),
        };
        self.states.states =
            model.next_state(&self.tape, self.ensemble.particles, self.states.states, control, outcome, t)?;
        self.true_state = model.next_state(&self.tape, self.theta_node, self.true_state, control, outcome, t)?;
        self.states.trajectory.push((control, outcome));

        let resource = model.resource(&control_values, t);
        self.resources += resource;
        self.wants_resampling = needs_resampling(&self.tape, &self.ensemble, &cfg.resampling);
        self.pending = Some(Pending {
            control,
            control_values,
            outcome,
            resource,
        });
        Ok(())
    }

    /// Optional resampling, estimator and termination check.
    fn settle(&mut self, model: &dyn SensorModel, cfg: &SimulationConfig, resample_now: bool, limit: usize) -> Result<()> {
        if resample_now {
            let states = self.states.states.map(|_| (&self.states, model));
            let r = resample(&self.tape, &self.ensemble, states, &cfg.resampling, &mut self.rng)?;
            self.ensemble = r.ensemble;
            if self.states.states.is_some() {
                self.states.states = r.states;
            }
        }
        let p = self.pending.take().expect("settle follows measure");
        let est = estimator(&self.tape, &self.ensemble)?;
        self.steps.push(StepRecord {
            control: p.control,
            control_values: p.control_values,
            outcome: p.outcome,
            resource: p.resource,
            cumulative: self.resources,
            estimator: est,
            estimate: self.tape.value_cloned(est).into_data(),
            log_likelihood: self.log_likelihood,
        });
        let exhausted = cfg.max_resources.is_some_and(|r| self.resources >= r);
        if exhausted || self.steps.len() >= limit {
            self.terminated_at = Some(self.steps.len());
        }
        Ok(())
    }

    fn finish(self) -> EpisodeRecord {
        EpisodeRecord {
            agent_nodes: self.bound.map(|b| b.nodes).unwrap_or_default(),
            tape: self.tape,
            theta: self.theta,
            prior_estimator: self.prior_estimator,
            prior_estimate: self.prior_estimate,
            steps: self.steps,
            terminated_at: self.terminated_at,
            weight: self.weight,
        }
    }
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

/// Run episodes following `plans` in lockstep.
pub fn run_planned(
    model: &dyn SensorModel,
    agent: &Agent,
    cfg: &SimulationConfig,
    plans: Vec<EpisodePlan>,
    seed: u64,
    batch_index: u64,
    mode: TapeMode,
) -> Result<Batch> {
    cfg.validate()?;
    if plans.is_empty() {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let params = agent.parameters();
    if let Some(p) = params {
        p.check_compatible(input_dim(model), &model.controls(), cfg.steps_for(model))?;
    }
    let b = plans.len();
    let mut lives: Vec<Live> = plans
        .into_iter()
        .enumerate()
        .map(|(k, plan)| {
            let rng = episode_rng(seed, batch_index, k as u64);
            Live::start(model, params, cfg, plan, rng, mode)
        })
        .collect::<Result<_>>()?;

    let limit = cfg.steps_for(model);
    let quota = cfg.quota(b);
    if limit == 0 {
        for l in &mut lives {
            l.terminated_at = Some(0);
        }
    }
    let mut realized = 0;
    for t in 0..limit {
        let done = lives.iter().filter(|l| l.terminated_at.is_some()).count();
        if done >= quota {
            break;
        }
        first_error(
            lives
                .par_iter_mut()
                .filter(|l| l.terminated_at.is_none())
                .map(|l| l.measure(model, agent, cfg, t))
                .collect(),
        )?;
        let active = b - done;
        let flagged = lives
            .iter()
            .filter(|l| l.terminated_at.is_none() && l.wants_resampling)
            .count();
        let resample_now = flagged > 0 && flagged as f64 >= cfg.resampling.batch_fraction * active as f64;
        first_error(
            lives
                .par_iter_mut()
                .filter(|l| l.terminated_at.is_none())
                .map(|l| l.settle(model, cfg, resample_now, limit))
                .collect(),
        )?;
        realized = t + 1;
    }
    Ok(Batch {
        records: lives.into_iter().map(Live::finish).collect(),
        realized_steps: realized,
    })
}

/// B episodes with θ drawn from the prior.
pub fn run_batch(
    model: &dyn SensorModel,
    agent: &Agent,
    cfg: &SimulationConfig,
    seed: u64,
    batch_index: u64,
    mode: TapeMode,
) -> Result<Batch> {
    let plans = vec![EpisodePlan::default(); cfg.batch_size];
    run_planned(model, agent, cfg, plans, seed, batch_index, mode)
}

/// A single episode; equivalent to a batch of one with ν = 1.
pub fn run_episode(
    model: &dyn SensorModel,
    agent: &Agent,
    cfg: &SimulationConfig,
    seed: u64,
    mode: TapeMode,
) -> Result<EpisodeRecord> {
    let single = SimulationConfig {
        batch_size: 1,
        nu: 1.0,
        ..cfg.clone()
    };
    let mut batch = run_batch(model, agent, &single, seed, 0, mode)?;
    Ok(batch.records.remove(0))
}

/// `episodes` forward-only episodes run to completion in chunks of the batch size.
pub fn evaluate(
    model: &dyn SensorModel,
    agent: &Agent,
    cfg: &SimulationConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeSummary>> {
    let eval = SimulationConfig { nu: 1.0, ..cfg.clone() };
    let mut out = Vec::with_capacity(episodes);
    let chunk = eval.batch_size.max(1);
    let mut index = 0u64;
    while out.len() < episodes {
        let n = chunk.min(episodes - out.len());
        let batch = run_planned(model, agent, &eval, vec![EpisodePlan::default(); n], seed, index, TapeMode::Forward)?;
        out.extend(batch.records.iter().map(EpisodeRecord::summarize));
        index += 1;
    }
    Ok(out)
}
