//! Differentiable particle filter: Bayes update, moments, soft resampling with
//! perturbation and proposal, and per-particle probe states.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Node, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{Outcome, SensorModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplingConfig {
    /// Resample when N_eff < threshold·N.
    pub threshold: f64,
    /// Mixing between posterior weights and the uniform law when drawing.
    pub soft_alpha: f64,
    pub perturb_beta: f64,
    /// Fraction of particles kept from the old ensemble when proposing.
    pub keep_gamma: f64,
    /// Fraction of a batch that must request resampling.
    pub batch_fraction: f64,
    pub scibior_correction: bool,
    pub perturbation: bool,
    pub proposal: bool,
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            soft_alpha: 0.5,
            perturb_beta: 0.98,
            keep_gamma: 0.99,
            batch_fraction: 0.98,
            scibior_correction: true,
            perturbation: true,
            proposal: true,
        }
    }
}

impl ResamplingConfig {
    /// Plain importance resampling: no perturbation, no proposal.
    pub fn plain() -> Self {
        Self {
            perturbation: false,
            proposal: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo_open: bool, lo: f64, hi: f64| {
            let ok = if lo_open { v > lo } else { v >= lo } && v <= hi;
            if ok {
                Ok(())
            } else {
                Err(Error::config(
                    format!("resampling.{name}"),
                    format!("{v} outside {}{lo}, {hi}]", if lo_open { "(" } else { "[" }),
                ))
            }
        };
        check("threshold", self.threshold, false, 0.0, 1.0)?;
        check("soft_alpha", self.soft_alpha, false, 0.0, 1.0)?;
        check("perturb_beta", self.perturb_beta, true, 0.0, 1.0)?;
        check("keep_gamma", self.keep_gamma, true, 0.0, 1.0)?;
        check("batch_fraction", self.batch_fraction, true, 0.0, 1.0)?;
        Ok(())
    }
}

/// Weighted particles living on one tape.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    /// N×d.
    pub particles: Node,
    /// N×1.
    pub weights: Node,
    pub bounds: Vec<(f64, f64)>,
    pub discrete: Vec<bool>,
}

/// Per-particle probe states with the trajectory needed to rebuild them.
#[derive(Clone, Debug, Default)]
pub struct StateEnsemble {
    /// N×s, or `None` for stateless models.
    pub states: Option<Node>,
    /// Controls and outcomes of every executed step.
    pub trajectory: Vec<(Node, Outcome)>,
}

impl ParticleEnsemble {
    pub fn from_parts(
        tape: &Tape,
        particles: Tensor,
        weights: Tensor,
        bounds: Vec<(f64, f64)>,
        discrete: Vec<bool>,
    ) -> Result<Self> {
        if particles.rows() != weights.rows() || weights.cols() != 1 {
            return Err(Error::invalid("particles and weights disagree in length"));
        }
        if bounds.len() != particles.cols() || discrete.len() != particles.cols() {
            return Err(Error::invalid("bounds and discrete markers must match the parameter dimension"));
        }
        Ok(Self {
            particles: tape.constant(particles),
            weights: tape.constant(weights),
            bounds,
            discrete,
        })
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.weights).0
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn continuous_axes(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.discrete[i]).collect()
    }
}

pub fn init_ensemble(
    tape: &Tape,
    model: &dyn SensorModel,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<ParticleEnsemble> {
    if n < 2 {
        return Err(Error::config("particles", "need at least two particles"));
    }
    let d = model.param_dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend(model.sample_prior(rng));
    }
    ParticleEnsemble::from_parts(
        tape,
        Tensor::new(n, d, data)?,
        Tensor::filled(n, 1, 1.0 / n as f64),
        model.bounds(),
        model.discrete_axes(),
    )
}

/// w_j ← p_j·w_j / Σ_k p_k·w_k.
pub fn bayes_update(tape: &Tape, e: &ParticleEnsemble, likelihoods: Node) -> Result<ParticleEnsemble> {
    let unnorm = tape.mul(e.weights, likelihoods)?;
    let evidence = tape.sum(unnorm)?;
    if !(tape.item(evidence) > 0.0) {
        return Err(Error::invalid("all particle likelihoods vanish: outcome impossible under the model"));
    }
    Ok(ParticleEnsemble {
        weights: tape.div(unnorm, evidence)?,
        ..e.clone()
    })
}

/// Posterior mean as a 1×d node.
pub fn mean(tape: &Tape, e: &ParticleEnsemble) -> Result<Node> {
    let wt = tape.transpose(e.weights)?;
    Ok(tape.matmul(wt, e.particles)?)
}

/// Posterior covariance as a d×d node.
pub fn covariance(tape: &Tape, e: &ParticleEnsemble) -> Result<Node> {
    let m = mean(tape, e)?;
    let centered = tape.sub(e.particles, m)?;
    let weighted = tape.mul(centered, e.weights)?;
    let wt = tape.transpose(weighted)?;
    Ok(tape.matmul(wt, centered)?)
}

/// Forward-value mean and covariance, without touching the tape.
pub fn moments(tape: &Tape, e: &ParticleEnsemble) -> (Vec<f64>, Tensor) {
    let p = tape.value(e.particles);
    let w = tape.value(e.weights);
    let (n, d) = p.shape();
    let mut m = vec![0.0; d];
    for j in 0..n {
        for (i, mi) in m.iter_mut().enumerate() {
            *mi += w.get(j, 0) * p.get(j, i);
        }
    }
    let mut cov = Tensor::zeros(d, d);
    for j in 0..n {
        let wj = w.get(j, 0);
        for a in 0..d {
            for b in 0..d {
                let v = cov.get(a, b) + wj * (p.get(j, a) - m[a]) * (p.get(j, b) - m[b]);
                cov.set(a, b, v);
            }
        }
    }
    (m, cov)
}

/// 1 / Σ w_j².
pub fn effective_particles(tape: &Tape, e: &ParticleEnsemble) -> f64 {
    let w = tape.value(e.weights);
    1.0 / w.data().iter().map(|x| x * x).sum::<f64>()
}

pub fn needs_resampling(tape: &Tape, e: &ParticleEnsemble, cfg: &ResamplingConfig) -> bool {
    effective_particles(tape, e) < cfg.threshold * e.len(tape) as f64
}

/// Result of one resampling.
#[derive(Clone, Debug)]
pub struct Resampled {
    pub ensemble: ParticleEnsemble,
    /// Rebuilt per-particle states.
    pub states: Option<Node>,
    /// Source index φ(j) of every kept particle.
    pub indices: Vec<usize>,
    /// q_{φ(j)} for the kept particles (K×1), carrying gradient.
    pub selected_q: Node,
}

/// Soft resampling with optional Ścibior–Wood weights, perturbation, proposal and state rebuild.
pub fn resample<R: Rng + ?Sized>(
    tape: &Tape,
    e: &ParticleEnsemble,
    states: Option<(&StateEnsemble, &dyn SensorModel)>,
    cfg: &ResamplingConfig,
    rng: &mut R,
) -> Result<Resampled> {
    cfg.validate()?;
    let n = e.len(tape);
    let kept = if cfg.proposal {
        ((cfg.keep_gamma * n as f64).round() as usize).clamp(1, n)
    } else {
        n
    };
    let alpha = cfg.soft_alpha;

    // 1. soft weights q = αw + (1−α)/N and the draw φ
    let aw = tape.scale(e.weights, alpha)?;
    let q = tape.offset(aw, (1.0 - alpha) / n as f64)?;
    let indices: Vec<usize> = {
        let qv = tape.value(q);
        let dist = WeightedIndex::new(qv.data())
            .map_err(|err| Error::invalid(format!("resampling weights: {err}")))?;
        (0..kept).map(|_| dist.sample(rng)).collect()
    };

    // 2. importance weights w_φ/q_φ, normalized to the kept mass
    let w_sel = tape.gather_rows(e.weights, &indices)?;
    let q_sel = tape.gather_rows(q, &indices)?;
    let ratio = tape.div(w_sel, q_sel)?;
    let total = tape.sum(ratio)?;
    let normalized = tape.div(ratio, total)?;
    let mut new_w = tape.scale(normalized, kept as f64 / n as f64)?;

    // 3. Ścibior–Wood surrogate: forward factor is exactly 1
    if cfg.scibior_correction {
        let sg = tape.stop_gradient(q_sel);
        let factor = tape.div(q_sel, sg)?;
        new_w = tape.mul(new_w, factor)?;
    }

    let mut particles = tape.gather_rows(e.particles, &indices)?;
    let cont = e.continuous_axes();
    let needs_moments = !cont.is_empty() && (cfg.perturbation || (cfg.proposal && kept < n));
    let root = if needs_moments {
        let m = mean(tape, e)?;
        let cov = covariance(tape, e)?;
        let m_c = tape.select_cols(m, &cont)?;
        let cov_c = tape.select_cols(cov, &cont)?;
        let cov_c = tape.gather_rows(cov_c, &cont)?;
        let dc = cont.len();
        let eps = 1e-10 * tape.value(cov_c).trace() / dc as f64;
        let reg = tape.constant(Tensor::identity(dc).scale(eps));
        let cov_r = tape.add(cov_c, reg)?;
        Some((m_c, tape.sym_sqrt(cov_r)?))
    } else {
        None
    };

    // 4. perturbation θ'' = βθ' + (1−β)θ̂ + √(1−β²)·Σ^{1/2}u
    if cfg.perturbation {
        if let Some((m_c, sqrt_cov)) = root {
            let beta = cfg.perturb_beta;
            let kept_c = tape.select_cols(particles, &cont)?;
            let u = tape.constant(normal_matrix(rng, kept, cont.len()));
            let noise = tape.matmul(u, sqrt_cov)?;
            let noise = tape.scale(noise, (1.0 - beta * beta).sqrt())?;
            let shrunk = tape.scale(kept_c, beta)?;
            let pull = tape.scale(m_c, 1.0 - beta)?;
            let moved = tape.add(shrunk, pull)?;
            let moved = tape.add(moved, noise)?;
            particles = assemble(tape, e, particles, moved, &cont)?;
        }
    }

    // 5. proposal of N−K fresh particles from N(θ̂, Σ)
    if cfg.proposal && kept < n {
        let fresh = n - kept;
        let donors: Vec<usize> = {
            let wv = tape.value(e.weights);
            let dist = WeightedIndex::new(wv.data())
                .map_err(|err| Error::invalid(format!("posterior weights: {err}")))?;
            (0..fresh).map(|_| dist.sample(rng)).collect()
        };
        let base = tape.value_cloned(e.particles);
        let base = tape.constant(base);
        let base = tape.gather_rows(base, &donors)?;
        let proposed = match root {
            Some((m_c, sqrt_cov)) => {
                let u = tape.constant(normal_matrix(rng, fresh, cont.len()));
                let spread = tape.matmul(u, sqrt_cov)?;
                let drawn = tape.add(spread, m_c)?;
                assemble(tape, e, base, drawn, &cont)?
            }
            None => base,
        };
        particles = tape.concat_rows(&[particles, proposed])?;
        let fresh_w = tape.constant(Tensor::filled(fresh, 1, 1.0 / n as f64));
        new_w = tape.concat_rows(&[new_w, fresh_w])?;
    }

    let ensemble = ParticleEnsemble {
        particles,
        weights: new_w,
        bounds: e.bounds.clone(),
        discrete: e.discrete.clone(),
    };

    // 6. rebuild probe states along the recorded trajectory
    let rebuilt = match states {
        Some((s, model)) => rebuild_states(tape, model, ensemble.particles, &s.trajectory)?,
        None => None,
    };

    Ok(Resampled {
        ensemble,
        states: rebuilt,
        indices,
        selected_q: q_sel,
    })
}

/// Evolve fresh per-particle states through a recorded trajectory.
pub fn rebuild_states(
    tape: &Tape,
    model: &dyn SensorModel,
    particles: Node,
    trajectory: &[(Node, Outcome)],
) -> Result<Option<Node>> {
    let mut state = model.initial_state(tape, particles)?;
    for (step, &(control, outcome)) in trajectory.iter().enumerate() {
        state = model.next_state(tape, particles, state, control, outcome, step)?;
    }
    Ok(state)
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("positive dimensions")
}

/// Replace the continuous columns of `full` by `moved` (clamped to bounds).
fn assemble(tape: &Tape, e: &ParticleEnsemble, full: Node, moved: Node, cont: &[usize]) -> Result<Node> {
    let mut cols = Vec::with_capacity(e.dim());
    for axis in 0..e.dim() {
        match cont.iter().position(|&c| c == axis) {
            Some(k) => {
                let col = tape.select_cols(moved, &[k])?;
                let (lo, hi) = e.bounds[axis];
                cols.push(tape.clamp(col, lo, hi)?);
            }
            None => cols.push(tape.select_cols(full, &[axis])?),
        }
    }
    Ok(tape.concat_cols(&cols)?)
}

/// Point estimate: MAP over merged discrete values on discrete axes, posterior
/// mean on continuous axes. Returned as a 1×d node; discrete entries are constants.
pub fn estimator(tape: &Tape, e: &ParticleEnsemble) -> Result<Node> {
    let m = mean(tape, e)?;
    if !e.discrete.iter().any(|&d| d) {
        return Ok(m);
    }
    let map = argmax_estimator(tape, e);
    let mut cols = Vec::with_capacity(e.dim());
    for axis in 0..e.dim() {
        if e.discrete[axis] {
            cols.push(tape.constant(Tensor::scalar(map[axis])));
        } else {
            cols.push(tape.select_cols(m, &[axis])?);
        }
    }
    Ok(tape.concat_cols(&cols)?)
}

/// Maximum a posteriori value over the discrete axes after merging the weights
/// of identical values. Ties go to the value seen first (lowest particle index).
/// Continuous axes carry the posterior mean.
pub fn argmax_estimator(tape: &Tape, e: &ParticleEnsemble) -> Vec<f64> {
    let p = tape.value(e.particles);
    let w = tape.value(e.weights);
    let disc: Vec<usize> = (0..e.dim()).filter(|&i| e.discrete[i]).collect();
    let mut groups: Vec<(Vec<f64>, f64)> = Vec::new();
    for j in 0..p.rows() {
        let key: Vec<f64> = disc.iter().map(|&i| p.get(j, i)).collect();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some(g) => g.1 += w.get(j, 0),
            None => groups.push((key, w.get(j, 0))),
        }
    }
    let mut best = 0;
    for (i, g) in groups.iter().enumerate() {
        if g.1 > groups[best].1 {
            best = i;
        }
    }
    drop((p, w));
    let (m, _) = moments(tape, e);
    let mut out = m;
    for (k, &axis) in disc.iter().enumerate() {
        out[axis] = groups[best].0[k];
    }
    out
}
