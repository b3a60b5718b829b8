//! Control policies: trainable MLP and static table, plus parameter-free baselines.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_normal_init, sigmoid, Node, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::ControlSpec;
use crate::particle_filter::{moments, ParticleEnsemble};

pub const CHECKPOINT_FORMAT: &str = "metrosynth-agent";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden layout of the default network.
pub const DEFAULT_HIDDEN: [usize; 5] = [64; 5];

/// How a raw network output becomes a physical control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputMap {
    /// lo + (hi − lo)·σ(z), or the same in log space.
    Interval { lo: f64, hi: f64, log_scale: bool },
    /// Sample from softmax(z) over a finite set.
    Softmax { choices: Vec<f64> },
}

impl OutputMap {
    pub fn from_spec(spec: &ControlSpec) -> Self {
        OutputMap::Interval {
            lo: spec.lo,
            hi: spec.hi,
            log_scale: spec.log_scale,
        }
    }

    fn width(&self) -> usize {
        match self {
            OutputMap::Interval { .. } => 1,
            OutputMap::Softmax { choices } => choices.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            OutputMap::Interval { lo, hi, log_scale } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || (*log_scale && *lo <= 0.0) {
                    return Err(Error::config("outputs", format!("bad control interval [{lo}, {hi}]")));
                }
            }
            OutputMap::Softmax { choices } => {
                if choices.is_empty() {
                    return Err(Error::config("outputs", "empty discrete control set"));
                }
            }
        }
        Ok(())
    }

    /// Raw value mapping to `x` under the squash. Only for intervals.
    pub fn inverse(&self, x: f64) -> Option<f64> {
        match *self {
            OutputMap::Interval { lo, hi, log_scale } => {
                let u = if log_scale {
                    (x.ln() - lo.ln()) / (hi.ln() - lo.ln())
                } else {
                    (x - lo) / (hi - lo)
                };
                let u = u.clamp(1e-12, 1.0 - 1e-12);
                Some((u / (1.0 - u)).ln())
            }
            OutputMap::Softmax { .. } => None,
        }
    }

    fn squash_value(&self, z: f64) -> f64 {
        match *self {
            OutputMap::Interval { lo, hi, log_scale } => {
                let s = sigmoid(z);
                if log_scale {
                    (lo.ln() + (hi.ln() - lo.ln()) * s).exp()
                } else {
                    lo + (hi - lo) * s
                }
            }
            OutputMap::Softmax { .. } => f64::NAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentVariant {
    Mlp { input_dim: usize, hidden: Vec<usize> },
    /// One row of raw outputs per measurement step.
    StaticTable { rows: usize },
}

/// Trainable parameters λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParameters {
    pub variant: AgentVariant,
    pub outputs: Vec<OutputMap>,
    /// MLP: W₁, b₁, …, W_out, b_out with W of shape out×in. Static: the table.
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    shapes: Vec<(usize, usize)>,
    agent: AgentParameters,
}

impl AgentParameters {
    /// tanh MLP with Glorot-normal weights and zero biases.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        outputs: Vec<OutputMap>,
        rng: &mut R,
    ) -> Result<Self> {
        let variant = AgentVariant::Mlp {
            input_dim,
            hidden: hidden.to_vec(),
        };
        let mut tensors = Vec::new();
        let width: usize = outputs.iter().map(OutputMap::width).sum();
        let mut fan_in = input_dim;
        for &h in hidden.iter().chain(std::iter::once(&width)) {
            tensors.push(glorot_normal_init(h, fan_in, rng)?);
            tensors.push(Tensor::zeros(h, 1));
            fan_in = h;
        }
        let p = Self {
            variant,
            outputs,
            tensors,
        };
        p.validate()?;
        Ok(p)
    }

    /// Table whose rows start at the given controls, or at the interval midpoints.
    pub fn static_table(rows: usize, outputs: Vec<OutputMap>, initial: Option<&[Vec<f64>]>) -> Result<Self> {
        let width: usize = outputs.iter().map(OutputMap::width).sum();
        let mut table = Tensor::zeros(rows.max(1), width.max(1));
        if let Some(init) = initial {
            if init.len() != rows {
                return Err(Error::config(
                    "agent.initial_controls",
                    format!("expected {rows} rows, got {}", init.len()),
                ));
            }
            for (r, row) in init.iter().enumerate() {
                if row.len() != outputs.len() {
                    return Err(Error::config("agent.initial_controls", "row width differs from control count"));
                }
                let mut col = 0;
                for (o, &x) in outputs.iter().zip(row) {
                    let z = o.inverse(x).ok_or_else(|| {
                        Error::config("agent.initial_controls", "only interval controls can be initialized")
                    })?;
                    table.set(r, col, z);
                    col += o.width();
                }
            }
        }
        let p = Self {
            variant: AgentVariant::StaticTable { rows },
            outputs,
            tensors: vec![table],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn output_width(&self) -> usize {
        self.outputs.iter().map(OutputMap::width).sum()
    }

    pub fn is_static(&self) -> bool {
        matches!(self.variant, AgentVariant::StaticTable { .. })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn expected_shapes(&self) -> Vec<(usize, usize)> {
        let width = self.output_width();
        match &self.variant {
            AgentVariant::Mlp { input_dim, hidden } => {
                let mut shapes = Vec::new();
                let mut fan_in = *input_dim;
                for &h in hidden.iter().chain(std::iter::once(&width)) {
                    shapes.push((h, fan_in));
                    shapes.push((h, 1));
                    fan_in = h;
                }
                shapes
            }
            AgentVariant::StaticTable { rows } => vec![(*rows, width)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(Error::config("outputs", "agent has no controls"));
        }
        for o in &self.outputs {
            o.validate()?;
        }
        match &self.variant {
            AgentVariant::Mlp { input_dim, hidden } => {
                if *input_dim == 0 || hidden.iter().any(|&h| h == 0) {
                    return Err(Error::config("agent.hidden", "layer widths must be positive"));
                }
            }
            AgentVariant::StaticTable { rows } => {
                if *rows == 0 {
                    return Err(Error::config("agent.rows", "static table needs at least one row"));
                }
            }
        }
        let shapes: Vec<_> = self.tensors.iter().map(Tensor::shape).collect();
        if shapes != self.expected_shapes() {
            return Err(Error::Checkpoint(format!(
                "tensor shapes {shapes:?} do not match the declared layout {:?}",
                self.expected_shapes()
            )));
        }
        Ok(())
    }

    /// Put the parameters on a tape as variables.
    pub fn bind<'a>(&'a self, tape: &Tape) -> BoundAgent<'a> {
        BoundAgent {
            params: self,
            nodes: self.tensors.iter().map(|t| tape.variable(t.clone())).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            shapes: self.tensors.iter().map(Tensor::shape).collect(),
            agent: self.clone(),
        };
        serde_json::to_string_pretty(&ck).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let shapes: Vec<_> = ck.agent.tensors.iter().map(Tensor::shape).collect();
        if shapes != ck.shapes {
            return Err(Error::Checkpoint("shape metadata disagrees with tensors".into()));
        }
        ck.agent.validate()?;
        Ok(ck.agent)
    }

    /// Reject parameters that cannot drive the given input and controls.
    pub fn check_compatible(&self, input_dim: usize, controls: &[ControlSpec], steps: usize) -> Result<()> {
        if self.outputs.len() != controls.len() {
            return Err(Error::Checkpoint(format!(
                "agent has {} controls, model needs {}",
                self.outputs.len(),
                controls.len()
            )));
        }
        match &self.variant {
            AgentVariant::Mlp { input_dim: k, .. } if *k != input_dim => Err(Error::Checkpoint(format!(
                "agent expects {k} inputs, model provides {input_dim}"
            ))),
            AgentVariant::StaticTable { rows } if *rows < steps => Err(Error::Checkpoint(format!(
                "static table has {rows} rows, need at least {steps}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Parameters placed on a tape.
pub struct BoundAgent<'a> {
    pub params: &'a AgentParameters,
    /// Variable nodes, aligned with `params.tensors`.
    pub nodes: Vec<Node>,
}

/// A control vector and, for sampled discrete controls, the log-probability of the draw.
#[derive(Clone, Copy, Debug)]
pub struct ControlOutput {
    /// c×1.
    pub control: Node,
    pub log_prob: Option<Node>,
}

impl BoundAgent<'_> {
    /// Raw outputs z (width×1).
    fn raw(&self, tape: &Tape, input: Node, t: usize) -> Result<Node> {
        match &self.params.variant {
            AgentVariant::Mlp { .. } => {
                let mut h = input;
                let layers = self.nodes.len() / 2;
                for l in 0..layers {
                    let w = self.nodes[2 * l];
                    let b = self.nodes[2 * l + 1];
                    let lin = tape.matmul(w, h)?;
                    let lin = tape.add(lin, b)?;
                    h = if l + 1 < layers { tape.tanh(lin)? } else { lin };
                }
                Ok(h)
            }
            AgentVariant::StaticTable { rows } => {
                if t >= *rows {
                    return Err(Error::invalid(format!("step {t} beyond static table of {rows} rows")));
                }
                let row = tape.gather_rows(self.nodes[0], &[t])?;
                Ok(tape.transpose(row)?)
            }
        }
    }

    /// Deterministic controls. Fails if any output is a softmax.
    pub fn agent_control(&self, tape: &Tape, input: Node, t: usize) -> Result<Node> {
        if self.params.outputs.iter().any(|o| matches!(o, OutputMap::Softmax { .. })) {
            return Err(Error::invalid("discrete controls must be sampled with categorical_control"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(self.act(tape, input, t, &mut rng)?.control)
    }

    /// Controls with every softmax output sampled.
    pub fn act<R: Rng + ?Sized>(&self, tape: &Tape, input: Node, t: usize, rng: &mut R) -> Result<ControlOutput> {
        let z = self.raw(tape, input, t)?;
        let mut parts = Vec::with_capacity(self.params.outputs.len());
        let mut log_prob: Option<Node> = None;
        let mut offset = 0;
        for o in &self.params.outputs {
            match o {
                OutputMap::Interval { lo, hi, log_scale } => {
                    let zi = tape.element(z, offset, 0)?;
                    let s = tape.sigmoid(zi)?;
                    let x = if *log_scale {
                        let (a, b) = (lo.ln(), hi.ln());
                        let e = tape.scale(s, b - a)?;
                        let e = tape.offset(e, a)?;
                        tape.exp(e)?
                    } else {
                        let e = tape.scale(s, hi - lo)?;
                        tape.offset(e, *lo)?
                    };
                    parts.push(x);
                }
                OutputMap::Softmax { choices } => {
                    let idx: Vec<usize> = (offset..offset + choices.len()).collect();
                    let logits = tape.gather_rows(z, &idx)?;
                    let (value, lp) = sample_softmax(tape, logits, choices, rng)?;
                    parts.push(tape.constant(Tensor::scalar(value)));
                    log_prob = Some(match log_prob {
                        Some(acc) => tape.add(acc, lp)?,
                        None => lp,
                    });
                }
            }
            offset += o.width();
        }
        Ok(ControlOutput {
            control: tape.concat_rows(&parts)?,
            log_prob,
        })
    }

    /// Sample the first softmax output; returns its value and log-probability node.
    pub fn categorical_control<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        input: Node,
        t: usize,
        rng: &mut R,
    ) -> Result<(f64, Node)> {
        let z = self.raw(tape, input, t)?;
        let mut offset = 0;
        for o in &self.params.outputs {
            if let OutputMap::Softmax { choices } = o {
                let idx: Vec<usize> = (offset..offset + choices.len()).collect();
                let logits = tape.gather_rows(z, &idx)?;
                return sample_softmax(tape, logits, choices, rng);
            }
            offset += o.width();
        }
        Err(Error::invalid("agent has no discrete control"))
    }
}

/// log-softmax with the max subtracted as a constant.
fn sample_softmax<R: Rng + ?Sized>(tape: &Tape, logits: Node, choices: &[f64], rng: &mut R) -> Result<(f64, Node)> {
    if choices.is_empty() {
        return Err(Error::invalid("empty discrete control set"));
    }
    let top = tape.value(logits).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.offset(logits, -top)?;
    let ex = tape.exp(shifted)?;
    let total = tape.sum(ex)?;
    let log_total = tape.log(total)?;
    let log_p = tape.sub(shifted, log_total)?;
    let probs: Vec<f64> = tape.value(log_p).data().iter().map(|l| l.exp()).collect();
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::invalid(format!("softmax: {e}")))?;
    let k = dist.sample(rng);
    Ok((choices[k], tape.element(log_p, k, 0)?))
}

/// Squash used by static tables and networks, for forward-only use.
pub fn squash(map: &OutputMap, z: f64) -> f64 {
    map.squash_value(z)
}

/// Particle guess heuristic: τ = 1/(‖θ₁ − θ₂‖ + ε) for two posterior draws.
pub fn pgh_control<R: Rng + ?Sized>(tape: &Tape, e: &ParticleEnsemble, rng: &mut R) -> Result<f64> {
    const EPS: f64 = 1e-5;
    let p = tape.value(e.particles);
    let w = tape.value(e.weights);
    let dist = WeightedIndex::new(w.data()).map_err(|err| Error::invalid(format!("posterior weights: {err}")))?;
    let (i, j) = (dist.sample(rng), dist.sample(rng));
    let d: f64 = p
        .row_slice(i)
        .iter()
        .zip(p.row_slice(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(pgh_time(d, EPS))
}

pub fn pgh_time(distance: f64, eps: f64) -> f64 {
    1.0 / (distance + eps)
}

/// τ = 1/(√tr Σ + 1/T₂*), clamped to `max_tau` when the result is unbounded.
pub fn sigma_inverse_control(tape: &Tape, e: &ParticleEnsemble, t2_star: Option<f64>, max_tau: f64) -> f64 {
    let (_, cov) = moments(tape, e);
    sigma_inverse_time(cov.trace(), t2_star, max_tau)
}

pub fn sigma_inverse_time(trace: f64, t2_star: Option<f64>, max_tau: f64) -> f64 {
    let den = trace.max(0.0).sqrt() + t2_star.map_or(0.0, |t| 1.0 / t);
    if den > 0.0 {
        (1.0 / den).min(max_tau)
    } else {
        max_tau
    }
}

/// Any policy that can drive an episode.
#[derive(Clone, Debug, PartialEq)]
pub enum Agent {
    Trainable(AgentParameters),
    Pgh,
    SigmaInverse { t2_star: Option<f64>, max_tau: f64 },
    /// Same control at every step.
    Constant(Vec<f64>),
}

impl Agent {
    pub fn parameters(&self) -> Option<&AgentParameters> {
        match self {
            Agent::Trainable(p) => Some(p),
            _ => None,
        }
    }
}
