//! Observed Fisher information and Cramér–Rao losses with unbiased gradients.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::{Node, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::SensorModel;
use crate::simulation::{Batch, EpisodeRecord};
use crate::training::{LossKind, LossSpec, SurrogateLoss};

/// Relative eigenvalue cutoff of the pseudo-inverse.
pub const EIGEN_CUTOFF: f64 = 1e-12;
/// Default weight of the uniform law in the importance-sampling proposal.
pub const DEFAULT_MIXING: f64 = 0.1;

/// Parameter scores of one trajectory, differentiable with respect to the controls.
#[derive(Clone, Debug)]
pub struct ScoreTrajectory {
    /// ∂log p(y_t|x_t, θ)/∂θ per step, d×1.
    pub scores: Vec<Node>,
    /// s_k = Σ_t scores, d×1.
    pub total: Node,
    /// f_k = s_k s_kᵀ, d×d.
    pub observed: Node,
}

/// Per-step scores by central differences with step 1e-6 × the axis width.
/// Discrete axes get zero score.
pub fn finite_difference_scores(record: &EpisodeRecord, model: &dyn SensorModel) -> Result<Vec<Node>> {
    let tape = &record.tape;
    let d = model.param_dim();
    let bounds = model.bounds();
    let discrete = model.discrete_axes();
    let n = record.steps.len();
    let mut per_axis: Vec<Vec<Node>> = Vec::with_capacity(d);
    for axis in 0..d {
        if discrete[axis] {
            per_axis.push(vec![tape.constant(Tensor::scalar(0.0)); n]);
            continue;
        }
        let h = 1e-6 * (bounds[axis].1 - bounds[axis].0);
        let plus = replay_log_likelihoods(record, model, axis, h)?;
        let minus = replay_log_likelihoods(record, model, axis, -h)?;
        let mut col = Vec::with_capacity(n);
        for (a, b) in plus.into_iter().zip(minus) {
            let diff = tape.sub(a, b)?;
            col.push(tape.scale(diff, 0.5 / h)?);
        }
        per_axis.push(col);
    }
    (0..n)
        .map(|t| {
            let parts: Vec<Node> = per_axis.iter().map(|c| c[t]).collect();
            Ok(tape.concat_rows(&parts)?)
        })
        .collect()
}

/// log p(y_t|x_t, θ + h·e_axis) for each recorded step, replaying the probe state.
fn replay_log_likelihoods(record: &EpisodeRecord, model: &dyn SensorModel, axis: usize, h: f64) -> Result<Vec<Node>> {
    let tape = &record.tape;
    let mut theta = record.theta.clone();
    theta[axis] += h;
    let params = tape.constant(Tensor::row(theta));
    let mut state = model.initial_state(tape, params)?;
    let mut out = Vec::with_capacity(record.steps.len());
    for (t, s) in record.steps.iter().enumerate() {
        let p = model.likelihood(tape, params, state, s.control, s.outcome, t)?;
        if !(tape.item(p) > 0.0) {
            return Err(Error::ImpossibleOutcome {
                step: t,
                outcome: s.outcome,
            });
        }
        out.push(tape.log(p)?);
        state = model.next_state(tape, params, state, s.control, s.outcome, t)?;
    }
    Ok(out)
}

/// Scores and observed Fisher information of one episode at its true parameters.
pub fn observed_fi(record: &EpisodeRecord, model: &dyn SensorModel) -> Result<ScoreTrajectory> {
    let tape = &record.tape;
    let d = model.param_dim();
    let mut analytic = Vec::with_capacity(record.steps.len());
    for (t, s) in record.steps.iter().enumerate() {
        match model.score(tape, &record.theta, s.control, s.outcome, t)? {
            Some(node) => analytic.push(node),
            None => break,
        }
    }
    let scores = if analytic.len() == record.steps.len() {
        analytic
    } else {
        finite_difference_scores(record, model)?
    };
    let mut total = tape.constant(Tensor::zeros(d, 1));
    for &s in &scores {
        total = tape.add(total, s)?;
    }
    let tt = tape.transpose(total)?;
    let observed = tape.matmul(total, tt)?;
    Ok(ScoreTrajectory {
        scores,
        total,
        observed,
    })
}

/// F̂ = (1/B)Σ_k w_k f_k with per-episode gradient carriers.
#[derive(Clone, Debug)]
pub struct FisherEstimate {
    pub matrix: Tensor,
    /// D_k = w_k·(f_k + sg(f_k)·log p_k), one per episode on its own tape.
    pub terms: Vec<Node>,
    pub batch: usize,
}

fn estimate(records: &[EpisodeRecord], model: &dyn SensorModel) -> Result<FisherEstimate> {
    if records.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let d = model.param_dim();
    let b = records.len();
    let mut matrix = Tensor::zeros(d, d);
    let mut terms = Vec::with_capacity(b);
    for r in records {
        let tape: &Tape = &r.tape;
        let traj = observed_fi(r, model)?;
        let f = tape.value_cloned(traj.observed);
        matrix.add_assign(&f.scale(r.weight / b as f64));
        let mut term = traj.observed;
        if let Some(ll) = r.final_log_likelihood() {
            let fc = tape.constant(f);
            let pair = tape.mul(fc, ll)?;
            term = tape.add(term, pair)?;
        }
        terms.push(tape.scale(term, r.weight)?);
    }
    Ok(FisherEstimate {
        matrix,
        terms,
        batch: b,
    })
}

/// Plain estimator over a batch sampled from the model's own outcome law.
pub fn fisher_estimate(records: &[EpisodeRecord], model: &dyn SensorModel) -> Result<FisherEstimate> {
    estimate(records, model)
}

/// Estimator for a batch sampled from a proposal law; each record's weight holds p/p̃.
pub fn importance_sampled_fi(records: &[EpisodeRecord], model: &dyn SensorModel) -> Result<FisherEstimate> {
    estimate(records, model)
}

/// Moore–Penrose inverse of a symmetric matrix, refusing G with support on the null space.
pub fn pseudo_inverse(f: &Tensor, g: &Tensor) -> Result<Tensor> {
    let d = f.rows();
    let m = DMatrix::from_row_slice(d, d, f.data());
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, |a, x| a.max(x.abs()));
    if !(top > 0.0) || !top.is_finite() {
        return Err(Error::SingularFisher("estimated Fisher information is zero".into()));
    }
    let gm = DMatrix::from_row_slice(d, d, g.data());
    let g_norm = gm.norm().max(f64::MIN_POSITIVE);
    let mut inv = DMatrix::<f64>::zeros(d, d);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        if lam.abs() <= EIGEN_CUTOFF * top {
            if (&gm * v).norm() > 1e-9 * g_norm {
                return Err(Error::SingularFisher(format!(
                    "eigenvalue {lam:e} below cutoff in a direction weighted by G"
                )));
            }
            continue;
        }
        inv += (v * v.transpose()) / lam;
    }
    let data: Vec<f64> = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| inv[(r, c)]).collect();
    Ok(Tensor::new(d, d, data)?)
}

/// Plain or log Cramér–Rao loss from a Fisher estimate.
pub fn cr_loss(fi: &FisherEstimate, records: &[EpisodeRecord], g: &Tensor, log: bool) -> Result<SurrogateLoss> {
    let finv = pseudo_inverse(&fi.matrix, g)?;
    let gf = g.matmul(&finv)?;
    let value = gf.trace();
    let c = finv.matmul(g)?.matmul(&finv)?;
    let b = fi.batch as f64;
    // d tr(G F⁻¹) = −tr(F⁻¹ G F⁻¹ dF)
    let factor = if log { -1.0 / (b * value) } else { -1.0 / b };
    let mut terms = Vec::with_capacity(records.len());
    let mut surrogate = 0.0;
    for (r, &dk) in records.iter().zip(&fi.terms) {
        let tape = &r.tape;
        let cn = tape.constant(c.clone());
        let prod = tape.mul(cn, dk)?;
        let tr = tape.sum(prod)?;
        let term = tape.scale(tr, factor)?;
        surrogate += tape.item(term);
        terms.push(Some(term));
    }
    Ok(SurrogateLoss {
        value: if log { value.ln() } else { value },
        surrogate,
        terms,
    })
}

/// tr[G·ℱ⁻¹] with ℱ the Fisher information pooled over θ drawn from the prior.
/// By convexity of the inverse this never exceeds the prior mean of tr[G·F(θ)⁻¹].
pub fn averaged_fi_loss(records: &[EpisodeRecord], model: &dyn SensorModel, g: &Tensor, log: bool) -> Result<SurrogateLoss> {
    let fi = fisher_estimate(records, model)?;
    cr_loss(&fi, records, g, log)
}

/// Cramér–Rao loss of a simulated batch per the loss kind.
pub fn cr_batch_loss(batch: &Batch, model: &dyn SensorModel, spec: &LossSpec) -> Result<SurrogateLoss> {
    let log = match spec.kind {
        LossKind::CramerRao => false,
        LossKind::LogCramerRao => true,
        _ => return Err(Error::invalid("not a Cramér–Rao loss")),
    };
    averaged_fi_loss(&batch.records, model, &spec.weights, log)
}
