//! Versioned JSON run configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentParameters, OutputMap, DEFAULT_HIDDEN};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{BoundSpec, DolinarModel, NvDcModel, NvResource, Regime, SensorModel};
use crate::particle_filter::ResamplingConfig;
use crate::simulation::{input_dim, SimulationConfig};
use crate::training::{LossKind, LossSpec, Normalization, Pointwise, TrainingConfig};

pub const CONFIG_VERSION: u32 = 1;

fn default_true() -> bool {
    true
}

fn default_nu() -> f64 {
    0.98
}

fn default_accumulation() -> usize {
    1
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_resource() -> NvResource {
    NvResource::Measurements
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    NvDc {
        /// μs; omitted for no dephasing.
        #[serde(default)]
        t2_star: Option<f64>,
        #[serde(default = "default_resource")]
        resource: NvResource,
        #[serde(default)]
        tau_bounds: Option<[f64; 2]>,
        #[serde(default = "default_true")]
        log_tau: bool,
    },
    Dolinar {
        references: usize,
    },
}

/// Initial rows of a static table: one control vector for every row, or one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialControls {
    Uniform(Vec<f64>),
    PerRow(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentConfig {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    StaticTable {
        #[serde(default)]
        initial_controls: Option<InitialControls>,
    },
    Pgh,
    SigmaInverse {
        /// Fallback evolution time; defaults to R_max, then the upper control bound.
        #[serde(default)]
        max_tau: Option<f64>,
    },
    Constant {
        controls: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormalizationConfig {
    None,
    DcBound {
        regime: Regime,
        #[serde(default)]
        t2_star: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default)]
    pub pointwise: Option<Pointwise>,
    /// G; identity on the continuous axes when omitted.
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub normalization: Option<NormalizationConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub agent: AgentConfig,
    pub loss: LossConfig,
    pub particles: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub max_resources: Option<f64>,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default)]
    pub resampling: ResamplingConfig,
    #[serde(default)]
    pub outcome_mixing: f64,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_accumulation")]
    pub accumulation: usize,
    #[serde(default)]
    pub clip: Option<f64>,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(field_of(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        self.simulation().validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if self.accumulation == 0 {
            return Err(Error::config("accumulation", "must be at least 1"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::config("clip", "must be positive"));
            }
        }
        let model = self.build_model()?;
        self.loss_spec(model.as_ref())?;
        if let AgentConfig::Constant { controls } = &self.agent {
            if controls.len() != model.controls().len() {
                return Err(Error::config("agent.controls", "length differs from the model's control count"));
            }
        }
        if let AgentConfig::Mlp { hidden } = &self.agent {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(Error::config("agent.hidden", "need at least one layer of positive width"));
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Box<dyn SensorModel>> {
        Ok(match &self.model {
            ModelConfig::NvDc {
                t2_star,
                resource,
                tau_bounds,
                log_tau,
            } => {
                let mut m = NvDcModel::new(*t2_star, *resource)?;
                if let Some([lo, hi]) = tau_bounds {
                    m = m.with_tau_bounds(*lo, *hi)?;
                }
                if !log_tau {
                    m = m.with_linear_tau();
                }
                Box::new(m)
            }
            ModelConfig::Dolinar { references } => Box::new(DolinarModel::new(*references)?),
        })
    }

    pub fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            particles: self.particles,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            max_resources: self.max_resources,
            nu: self.nu,
            resampling: self.resampling.clone(),
            outcome_mixing: self.outcome_mixing,
        }
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            accumulation: self.accumulation,
            clip: self.clip,
            seed: self.seed,
        }
    }

    pub fn loss_spec(&self, model: &dyn SensorModel) -> Result<LossSpec> {
        let d = model.param_dim();
        let g = match &self.loss.weights {
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::config("loss.weights", format!("G must be {d}×{d}")));
                }
                Tensor::new(d, d, rows.concat())?
            }
            None => {
                let disc = model.discrete_axes();
                let mut g = Tensor::zeros(d, d);
                let any_discrete = disc.iter().any(|&x| x);
                for (i, &is_disc) in disc.iter().enumerate() {
                    // discrimination tasks weight the discrete axes only
                    let on = if any_discrete { is_disc } else { true };
                    g.set(i, i, if on { 1.0 } else { 0.0 });
                }
                g
            }
        };
        let mut spec = LossSpec::new(self.loss.kind, g)?.with_baseline(self.loss.baseline);
        if let Some(p) = self.loss.pointwise {
            spec = spec.with_pointwise(p);
        }
        if let Some(NormalizationConfig::DcBound { regime, t2_star }) = &self.loss.normalization {
            spec = spec.with_normalization(Normalization::DcBound(BoundSpec {
                regime: *regime,
                t2_star: *t2_star,
            }));
        }
        Ok(spec)
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.agent, AgentConfig::Mlp { .. } | AgentConfig::StaticTable { .. })
    }

    /// Initial trainable parameters, seeded from the run seed.
    pub fn initial_parameters(&self, model: &dyn SensorModel) -> Result<Option<AgentParameters>> {
        let outputs: Vec<OutputMap> = model.controls().iter().map(OutputMap::from_spec).collect();
        let steps = self.simulation().steps_for(model);
        Ok(match &self.agent {
            AgentConfig::Mlp { hidden } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(u64::MAX);
                Some(AgentParameters::mlp(input_dim(model), hidden, outputs, &mut rng)?)
            }
            AgentConfig::StaticTable { initial_controls } => {
                let rows: Option<Vec<Vec<f64>>> = match initial_controls {
                    None => None,
                    Some(InitialControls::Uniform(v)) => Some(vec![v.clone(); steps]),
                    Some(InitialControls::PerRow(r)) => Some(r.clone()),
                };
                Some(AgentParameters::static_table(steps.max(1), outputs, rows.as_deref())?)
            }
            _ => None,
        })
    }

    /// The policy described by the config, with `params` for trainable agents.
    pub fn build_agent(&self, model: &dyn SensorModel, params: Option<AgentParameters>) -> Result<Agent> {
        Ok(match &self.agent {
            AgentConfig::Mlp { .. } | AgentConfig::StaticTable { .. } => {
                let p = match params {
                    Some(p) => p,
                    None => self
                        .initial_parameters(model)?
                        .ok_or_else(|| Error::config("agent", "no parameters"))?,
                };
                Agent::Trainable(p)
            }
            AgentConfig::Pgh => Agent::Pgh,
            AgentConfig::SigmaInverse { max_tau } => {
                let t2_star = match &self.model {
                    ModelConfig::NvDc { t2_star, .. } => *t2_star,
                    ModelConfig::Dolinar { .. } => {
                        return Err(Error::config("agent", "sigma_inverse applies to the NV model only"))
                    }
                };
                let fallback = max_tau
                    .or(self.max_resources)
                    .unwrap_or_else(|| model.controls()[0].hi);
                Agent::SigmaInverse {
                    t2_star,
                    max_tau: fallback,
                }
            }
            AgentConfig::Constant { controls } => Agent::Constant(controls.clone()),
        })
    }
}

/// Best-effort name of the offending field in a serde error.
fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["missing field `", "unknown field `", "unknown variant `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "config".to_string()
}
