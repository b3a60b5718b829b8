//! Oracle checks shared by the core integration tests and the acceptance suite.
#![allow(dead_code)]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metrosynth::agents::{Agent, AgentParameters, OutputMap};
use metrosynth::autodiff::{Node, Tape, Tensor};
use metrosynth::models::bounds::MU;
use metrosynth::models::nv::{nv_fisher_information, nv_likelihood};
use metrosynth::models::{dc_lower_bound, BoundSpec, NvDcModel, NvResource, Regime, SensorModel};
use metrosynth::particle_filter::{mean, moments, resample, ParticleEnsemble, ResamplingConfig};
use metrosynth::simulation::{run_planned, EpisodePlan, SimulationConfig, TapeMode};
use metrosynth::training::{batch_loss, loss_gradient, LossKind, LossSpec};

/// Outcome of one acceptance check.
#[derive(Debug)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------- gradients

#[derive(Clone, Debug)]
enum Step {
    Add(usize),
    Sub(usize),
    Mul(usize),
    DivSoft(usize),
    Tanh,
    Sin,
    Cos,
    ExpTanh,
    LogSoft,
    SqrtSoft,
    Sigmoid,
    RightMatmul(Tensor),
    LeftMatmulT(Tensor),
    AddRowSums,
    MulColSums(usize),
    AddMean(usize),
    Neg,
    Scale(f64),
    CubeTanh,
    PermuteRows(Vec<usize>),
    PermuteCols(Vec<usize>),
}

/// A random differentiable expression of two r×c inputs.
#[derive(Clone, Debug)]
pub struct Composition {
    rows: usize,
    cols: usize,
    steps: Vec<Step>,
    mix: (usize, usize),
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

impl Composition {
    pub fn random(rng: &mut impl Rng, depth: usize) -> (Self, Tensor, Tensor) {
        let rows = rng.random_range(1..=3);
        let cols = rng.random_range(1..=3);
        let mut steps = Vec::with_capacity(depth);
        for i in 0..depth {
            let pool = i + 2;
            let b = rng.random_range(0..pool);
            steps.push(match rng.random_range(0..21) {
                0 => Step::Add(b),
                1 => Step::Sub(b),
                2 => Step::Mul(b),
                3 => Step::DivSoft(b),
                4 => Step::Tanh,
                5 => Step::Sin,
                6 => Step::Cos,
                7 => Step::ExpTanh,
                8 => Step::LogSoft,
                9 => Step::SqrtSoft,
                10 => Step::Sigmoid,
                11 => Step::RightMatmul(random_matrix(rng, cols, cols, 1.0)),
                12 => Step::LeftMatmulT(random_matrix(rng, rows, rows, 1.0)),
                13 => Step::AddRowSums,
                14 => Step::MulColSums(b),
                15 => Step::AddMean(b),
                16 => Step::Neg,
                17 => Step::Scale(rng.random_range(-2.0..2.0)),
                18 => Step::CubeTanh,
                19 => Step::PermuteRows(permutation(rng, rows)),
                _ => Step::PermuteCols(permutation(rng, cols)),
            });
        }
        let mix = (rng.random_range(0..depth + 2), rng.random_range(0..depth + 2));
        let x = random_matrix(rng, rows, cols, 1.5);
        let y = random_matrix(rng, rows, cols, 1.5);
        (Self { rows, cols, steps, mix }, x, y)
    }

    /// Builds the expression on `tape`; returns the scalar output.
    pub fn build(&self, tape: &Tape, x: Node, y: Node) -> Node {
        let mut pool = vec![x, y];
        let mut a = x;
        for s in &self.steps {
            let t = tape;
            a = match s {
                Step::Add(b) => t.add(a, pool[*b]).unwrap(),
                Step::Sub(b) => t.sub(a, pool[*b]).unwrap(),
                Step::Mul(b) => t.mul(a, pool[*b]).unwrap(),
                Step::DivSoft(b) => {
                    let sq = t.powi(pool[*b], 2).unwrap();
                    let den = t.offset(sq, 1.0).unwrap();
                    t.div(a, den).unwrap()
                }
                Step::Tanh => t.tanh(a).unwrap(),
                Step::Sin => t.sin(a).unwrap(),
                Step::Cos => t.cos(a).unwrap(),
                Step::ExpTanh => {
                    let h = t.tanh(a).unwrap();
                    t.exp(h).unwrap()
                }
                Step::LogSoft => {
                    let sq = t.powi(a, 2).unwrap();
                    let o = t.offset(sq, 1.0).unwrap();
                    t.log(o).unwrap()
                }
                Step::SqrtSoft => {
                    let sq = t.powi(a, 2).unwrap();
                    let o = t.offset(sq, 0.5).unwrap();
                    t.sqrt(o).unwrap()
                }
                Step::Sigmoid => t.sigmoid(a).unwrap(),
                Step::RightMatmul(c) => {
                    let c = t.constant(c.clone());
                    t.matmul(a, c).unwrap()
                }
                Step::LeftMatmulT(c) => {
                    let c = t.constant(c.clone());
                    let at = t.transpose(a).unwrap();
                    let m = t.matmul(at, c).unwrap();
                    t.transpose(m).unwrap()
                }
                Step::AddRowSums => {
                    let s = t.sum_cols(a).unwrap();
                    let s = t.scale(s, 0.3).unwrap();
                    t.add(a, s).unwrap()
                }
                Step::MulColSums(b) => {
                    let s = t.sum_rows(pool[*b]).unwrap();
                    let s = t.tanh(s).unwrap();
                    t.mul(a, s).unwrap()
                }
                Step::AddMean(b) => {
                    let m = t.mean(pool[*b]).unwrap();
                    t.add(a, m).unwrap()
                }
                Step::Neg => t.neg(a).unwrap(),
                Step::Scale(s) => t.scale(a, *s).unwrap(),
                Step::CubeTanh => {
                    let h = t.tanh(a).unwrap();
                    t.powi(h, 3).unwrap()
                }
                Step::PermuteRows(p) => t.gather_rows(a, p).unwrap(),
                Step::PermuteCols(p) => t.select_cols(a, p).unwrap(),
            };
            pool.push(a);
        }
        let last = tape.sum(a).unwrap();
        let prod = tape.mul(pool[self.mix.0], pool[self.mix.1]).unwrap();
        let prod = tape.sum(prod).unwrap();
        let prod = tape.scale(prod, 0.5).unwrap();
        tape.add(last, prod).unwrap()
    }

    pub fn value(&self, x: &Tensor, y: &Tensor) -> f64 {
        let tape = Tape::no_grad();
        let xn = tape.constant(x.clone());
        let yn = tape.constant(y.clone());
        let out = self.build(&tape, xn, yn);
        tape.item(out)
    }

    pub fn gradient(&self, x: &Tensor, y: &Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let xn = tape.variable(x.clone());
        let yn = tape.variable(y.clone());
        let out = self.build(&tape, xn, yn);
        let g = tape.backward(out, &[xn, yn]).unwrap();
        (g.get(xn).unwrap().clone(), g.get(yn).unwrap().clone())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Central differences with one Richardson extrapolation.
pub fn richardson(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn finite_difference(c: &Composition, x: &Tensor, y: &Tensor) -> (Tensor, Tensor) {
    let fd = |which: usize| {
        let base = if which == 0 { x } else { y };
        let mut g = Tensor::zeros(base.rows(), base.cols());
        for i in 0..base.len() {
            let h = 1e-3 * base.data()[i].abs().max(1.0);
            let v = richardson(
                |dh| {
                    let mut p = base.clone();
                    p.data_mut()[i] += dh;
                    if which == 0 {
                        c.value(&p, y)
                    } else {
                        c.value(x, &p)
                    }
                },
                h,
            );
            g.data_mut()[i] = v;
        }
        g
    };
    (fd(0), fd(1))
}

fn norm(t: &[f64]) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Relative ℓ2 error between autodiff and finite-difference gradients.
pub fn composition_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, x, y) = Composition::random(&mut rng, 8);
    let (ax, ay) = c.gradient(&x, &y);
    let (fx, fy) = finite_difference(&c, &x, &y);
    let a: Vec<f64> = ax.data().iter().chain(ay.data()).copied().collect();
    let f: Vec<f64> = fx.data().iter().chain(fy.data()).copied().collect();
    let diff: Vec<f64> = a.iter().zip(&f).map(|(p, q)| p - q).collect();
    norm(&diff) / norm(&f).max(1e-12)
}

pub fn criterion_gradients() -> Check {
    let start = Instant::now();
    let worst = (0..100u64).map(composition_error).fold(0.0f64, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        worst < 1e-5 && secs < 10.0,
        format!("100 compositions, worst rel. err {worst:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- surrogate loss

pub const SURROGATE_OMEGA: f64 = 0.37;
pub const SURROGATE_TAUS: [f64; 2] = [1.3, 4.1];

pub fn nv_unbounded() -> NvDcModel {
    NvDcModel::new(None, NvResource::Measurements).unwrap()
}

/// All binary outcome strings of length two.
pub fn outcome_strings() -> Vec<Vec<i64>> {
    vec![vec![1, 1], vec![1, -1], vec![-1, 1], vec![-1, -1]]
}

pub fn surrogate_setup() -> (NvDcModel, SimulationConfig, AgentParameters) {
    let model = nv_unbounded();
    let sim = SimulationConfig {
        particles: 64,
        batch_size: 4,
        max_steps: 2,
        nu: 1.0,
        resampling: ResamplingConfig {
            threshold: 0.0,
            ..ResamplingConfig::plain()
        },
        ..SimulationConfig::default()
    };
    let rows: Vec<Vec<f64>> = SURROGATE_TAUS.iter().map(|&t| vec![t]).collect();
    let out = OutputMap::from_spec(&model.controls()[0]);
    let params = AgentParameters::static_table(2, vec![out], Some(&rows)).unwrap();
    (model, sim, params)
}

fn string_probability(outcomes: &[i64], taus: &[f64]) -> f64 {
    outcomes
        .iter()
        .zip(taus)
        .map(|(&y, &tau)| nv_likelihood(y, tau, SURROGATE_OMEGA, None))
        .product()
}

/// E[ℓ] = Σ_y p(y|λ)·ℓ_y(λ), with each string simulated on its own episode.
pub fn explicit_expectation(model: &NvDcModel, sim: &SimulationConfig, params: &AgentParameters) -> f64 {
    let plans = outcome_strings()
        .into_iter()
        .map(|y| EpisodePlan {
            theta: Some(vec![SURROGATE_OMEGA]),
            outcomes: Some(y),
            weight: None,
        })
        .collect();
    let agent = Agent::Trainable(params.clone());
    let batch = run_planned(model, &agent, sim, plans, 5, 0, TapeMode::Forward).unwrap();
    batch
        .records
        .iter()
        .zip(outcome_strings())
        .map(|(r, y)| {
            let s = r.summarize();
            let taus: Vec<f64> = s.steps.iter().map(|st| st.control[0]).collect();
            let err = s.final_estimate()[0] - SURROGATE_OMEGA;
            string_probability(&y, &taus) * err * err
        })
        .sum()
}

/// Gradient of the modified batch loss with weights B·p(y).
pub fn surrogate_gradient(
    model: &NvDcModel,
    sim: &SimulationConfig,
    params: &AgentParameters,
    log_likelihood: bool,
) -> Vec<f64> {
    let taus: Vec<f64> = (0..2)
        .map(|t| metrosynth::agents::squash(&params.outputs[0], params.tensors[0].get(t, 0)))
        .collect();
    let plans = outcome_strings()
        .into_iter()
        .map(|y| EpisodePlan {
            theta: Some(vec![SURROGATE_OMEGA]),
            weight: Some(4.0 * string_probability(&y, &taus)),
            outcomes: Some(y),
        })
        .collect();
    let agent = Agent::Trainable(params.clone());
    let mut batch = run_planned(model, &agent, sim, plans, 5, 0, TapeMode::Record).unwrap();
    let spec = LossSpec::identity(LossKind::Mse, 1).unwrap().with_log_likelihood(log_likelihood);
    let loss = batch_loss(&batch, &spec).unwrap();
    let g = loss_gradient(&mut batch.records, &loss, params).unwrap();
    g[0].data().to_vec()
}

pub fn expectation_gradient(model: &NvDcModel, sim: &SimulationConfig, params: &AgentParameters) -> Vec<f64> {
    (0..2)
        .map(|t| {
            richardson(
                |h| {
                    let mut p = params.clone();
                    let v = p.tensors[0].get(t, 0);
                    p.tensors[0].set(t, 0, v + h);
                    explicit_expectation(model, sim, &p)
                },
                1e-3,
            )
        })
        .collect()
}

pub fn criterion_surrogate() -> Check {
    let (model, sim, params) = surrogate_setup();
    let oracle = expectation_gradient(&model, &sim, &params);
    let full = surrogate_gradient(&model, &sim, &params, true);
    let biased = surrogate_gradient(&model, &sim, &params, false);
    let rel = |a: &[f64]| {
        let d: Vec<f64> = a.iter().zip(&oracle).map(|(x, y)| x - y).collect();
        norm(&d) / norm(&oracle)
    };
    let (e_full, e_biased) = (rel(&full), rel(&biased));
    Check::new(
        e_full < 1e-8 && e_biased > 1e-3,
        format!("rel. err {e_full:.2e} with log-likelihood terms, {e_biased:.2e} without"),
    )
}

// ---------------------------------------------------------------- Ścibior–Wood

pub const SW_PARTICLES: [f64; 4] = [0.12, 0.35, 0.61, 0.88];
pub const SW_TRUTH: f64 = 0.4;
pub const SW_ALPHA: f64 = 0.5;

/// Weights after two NV updates with evolution times λ, and their λ-derivatives.
pub fn sw_weights(lambda: [f64; 2], outcomes: [i64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let n = SW_PARTICLES.len();
    let mut unnorm = vec![1.0; n];
    let mut dlog = vec![[0.0; 2]; n];
    for (a, (&tau, &y)) in lambda.iter().zip(&outcomes).enumerate() {
        for (j, &th) in SW_PARTICLES.iter().enumerate() {
            let p = 0.5 + 0.5 * y as f64 * (th * tau).cos();
            unnorm[j] *= p;
            dlog[j][a] = -0.5 * y as f64 * th * (th * tau).sin() / p;
        }
    }
    let z: f64 = unnorm.iter().sum();
    let w: Vec<f64> = unnorm.iter().map(|u| u / z).collect();
    let mut avg = [0.0; 2];
    for j in 0..n {
        for a in 0..2 {
            avg[a] += w[j] * dlog[j][a];
        }
    }
    let dw = (0..n)
        .map(|j| [w[j] * (dlog[j][0] - avg[0]), w[j] * (dlog[j][1] - avg[1])])
        .collect();
    (w, dw)
}

/// Gradient of (θ̂ − θ)² after one forced resampling, with or without the surrogate factor.
pub fn sw_gradient(lambda: [f64; 2], outcomes: [i64; 2], seed: u64, correction: bool) -> (Vec<f64>, Vec<usize>, Vec<f64>, f64) {
    let tape = Tape::new();
    let lam = tape.variable(Tensor::row(lambda.to_vec()));
    let theta = tape.constant(Tensor::column(SW_PARTICLES.to_vec()));
    let mut weights = tape.constant(Tensor::filled(4, 1, 0.25));
    for (a, &y) in outcomes.iter().enumerate() {
        let tau = tape.select_cols(lam, &[a]).unwrap();
        let phase = tape.mul(theta, tau).unwrap();
        let c = tape.cos(phase).unwrap();
        let c = tape.scale(c, 0.5 * y as f64).unwrap();
        let p = tape.offset(c, 0.5).unwrap();
        let u = tape.mul(weights, p).unwrap();
        let z = tape.sum(u).unwrap();
        weights = tape.div(u, z).unwrap();
    }
    let e = ParticleEnsemble {
        particles: theta,
        weights,
        bounds: vec![(0.0, 1.0)],
        discrete: vec![false],
    };
    let cfg = ResamplingConfig {
        soft_alpha: SW_ALPHA,
        scibior_correction: correction,
        ..ResamplingConfig::plain()
    };
    let r = resample(&tape, &e, None, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let est = mean(&tape, &r.ensemble).unwrap();
    let err = tape.offset(est, -SW_TRUTH).unwrap();
    let loss = tape.powi(err, 2).unwrap();
    let g = tape.backward(loss, &[lam]).unwrap();
    let new_w = tape.value_cloned(r.ensemble.weights).into_data();
    let est = tape.item(est);
    (g.get(lam).unwrap().data().to_vec(), r.indices, new_w, est)
}

/// Explicit second- and first-order log-likelihood terms for the resampling draw.
pub fn sw_explicit_terms(lambda: [f64; 2], outcomes: [i64; 2], indices: &[usize], w_new: &[f64]) -> [f64; 2] {
    let n = SW_PARTICLES.len() as f64;
    let (w, dw) = sw_weights(lambda, outcomes);
    let dlogq: Vec<[f64; 2]> = indices
        .iter()
        .map(|&k| {
            let q = SW_ALPHA * w[k] + (1.0 - SW_ALPHA) / n;
            [SW_ALPHA * dw[k][0] / q, SW_ALPHA * dw[k][1] / q]
        })
        .collect();
    let th: Vec<f64> = indices.iter().map(|&k| SW_PARTICLES[k]).collect();
    let mut out = [0.0; 2];
    for (a, slot) in out.iter_mut().enumerate() {
        let mut second = 0.0;
        for i in 0..th.len() {
            for j in 0..th.len() {
                second += w_new[i] * w_new[j] * th[i] * th[j] * (dlogq[i][a] + dlogq[j][a]);
            }
        }
        let first: f64 = (0..th.len())
            .map(|j| w_new[j] * 2.0 * th[j] * SW_TRUTH * dlogq[j][a])
            .sum();
        *slot = second - first;
    }
    out
}

/// Worst componentwise gap over several draws φ.
pub fn sw_worst_gap(draws: u64) -> f64 {
    let lambda = [2.3, 5.7];
    let mut worst = 0.0f64;
    for (i, outcomes) in [[1, 1], [1, -1], [-1, 1], [-1, -1]].iter().enumerate() {
        for s in 0..draws {
            let seed = 100 * i as u64 + s;
            let (on, idx_on, w_on, _) = sw_gradient(lambda, *outcomes, seed, true);
            let (off, idx_off, _, _) = sw_gradient(lambda, *outcomes, seed, false);
            assert_eq!(idx_on, idx_off, "same draw with and without the correction");
            let extra = sw_explicit_terms(lambda, *outcomes, &idx_on, &w_on);
            for a in 0..2 {
                worst = worst.max((on[a] - (off[a] + extra[a])).abs());
            }
        }
    }
    worst
}

pub fn criterion_scibior() -> Check {
    let gap = sw_worst_gap(8);
    Check::new(gap < 1e-8, format!("32 draws, worst componentwise gap {gap:.2e}"))
}

// ---------------------------------------------------------------- resampling

/// Mean drift and standard error of (mean, var₀, var₁, cov) after resampling.
pub fn resampling_drift(trials: usize, n: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut p = Vec::with_capacity(2 * n);
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        p.push(a);
        p.push(b);
        w.push((-(a - 0.3).powi(2) / 0.02 - (b - 0.6).powi(2) / 0.08 + 0.5 * a * b).exp());
    }
    let z: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x / z).collect();
    let particles = Tensor::new(n, 2, p).unwrap();
    let weights = Tensor::column(w);
    let stats = |m: &[f64], c: &Tensor| [m[0], m[1], c.get(0, 0), c.get(1, 1), c.get(0, 1)];
    let base = {
        let tape = Tape::no_grad();
        let e = ParticleEnsemble::from_parts(&tape, particles.clone(), weights.clone(), vec![(0.0, 1.0); 2], vec![false; 2])
            .unwrap();
        let (m, c) = moments(&tape, &e);
        stats(&m, &c)
    };
    let cfg = ResamplingConfig::plain();
    let mut sums = [0.0; 5];
    let mut squares = [0.0; 5];
    for trial in 0..trials {
        let tape = Tape::no_grad();
        let e = ParticleEnsemble::from_parts(&tape, particles.clone(), weights.clone(), vec![(0.0, 1.0); 2], vec![false; 2])
            .unwrap();
        let r = resample(&tape, &e, None, &cfg, &mut ChaCha8Rng::seed_from_u64(trial as u64)).unwrap();
        let (m, c) = moments(&tape, &r.ensemble);
        let s = stats(&m, &c);
        for i in 0..5 {
            let d = s[i] - base[i];
            sums[i] += d;
            squares[i] += d * d;
        }
    }
    let t = trials as f64;
    (0..5)
        .map(|i| {
            let m = sums[i] / t;
            let var = (squares[i] / t - m * m) * t / (t - 1.0);
            (m, (var / t).sqrt())
        })
        .collect()
}

pub fn criterion_resampling() -> Check {
    let drift = resampling_drift(1000, 1000);
    let worst = drift.iter().map(|(m, se)| m.abs() / se).fold(0.0f64, f64::max);
    Check::new(worst < 3.0, format!("worst drift {worst:.2} standard errors over mean and covariance"))
}

// ---------------------------------------------------------------- Fisher information

/// Σ_y p(y) f(y) with f the observed FI of a one-measurement episode.
pub fn enumerated_fi(omega: f64, tau: f64, t2_star: Option<f64>) -> f64 {
    let model = NvDcModel::new(t2_star, NvResource::Measurements).unwrap();
    let (lo, hi) = model.tau_bounds();
    let model = model.with_tau_bounds(lo.min(tau / 2.0), hi.max(2.0 * tau)).unwrap();
    let sim = SimulationConfig {
        particles: 8,
        batch_size: 2,
        max_steps: 1,
        nu: 1.0,
        ..SimulationConfig::default()
    };
    let plans = [1i64, -1]
        .iter()
        .map(|&y| EpisodePlan {
            theta: Some(vec![omega]),
            outcomes: Some(vec![y]),
            weight: None,
        })
        .collect();
    let batch = run_planned(&model, &Agent::Constant(vec![tau]), &sim, plans, 1, 0, TapeMode::Record).unwrap();
    batch
        .records
        .iter()
        .map(|r| {
            let y = r.steps[0].outcome;
            let f = metrosynth::fisher::observed_fi(r, &model).unwrap();
            nv_likelihood(y, tau, omega, t2_star) * r.tape.value(f.observed).get(0, 0)
        })
        .sum()
}

/// The decohered single-measurement FI written with both outcome probabilities in the denominator.
pub fn decohered_fi(omega: f64, tau: f64, t2: f64) -> f64 {
    let d = (-tau / t2).exp();
    let c = (omega * tau / 2.0).cos().powi(2);
    let s = (omega * tau / 2.0).sin().powi(2);
    tau * tau * d * d * c * s / ((d * c + (1.0 - d) / 2.0) * (d * s + (1.0 - d) / 2.0))
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    f(0.5 * (a + b))
}

/// sup over x > 0 of x²e^{−2x}/(1 − e^{−2x}) by a grid then golden-section refinement.
pub fn mu_by_search() -> f64 {
    let g = |x: f64| x * x * (-2.0 * x).exp() / (1.0 - (-2.0 * x).exp());
    let grid: Vec<f64> = (1..=1000).map(|i| i as f64 * 0.005).collect();
    let best = grid
        .iter()
        .copied()
        .max_by(|a, b| g(*a).partial_cmp(&g(*b)).unwrap())
        .unwrap();
    golden_max(g, (best - 0.005).max(1e-6), best + 0.005)
}

pub fn criterion_fisher() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_free = 0.0f64;
    for _ in 0..20 {
        let omega = rng.random_range(0.01..0.99);
        let tau = rng.random_range(0.1..60.0);
        let e = enumerated_fi(omega, tau, None);
        worst_free = worst_free.max((e - tau * tau).abs() / (tau * tau));
    }
    let mut worst_dec = 0.0f64;
    for _ in 0..20 {
        let omega = rng.random_range(0.01..0.99);
        let t2 = rng.random_range(2.0..40.0);
        let tau = rng.random_range(0.05..2.0) * t2;
        let e = enumerated_fi(omega, tau, Some(t2));
        let closed = decohered_fi(omega, tau, t2);
        worst_dec = worst_dec.max((e - closed).abs() / closed);
        worst_dec = worst_dec.max((nv_fisher_information(omega, tau, Some(t2)) - closed).abs() / closed);
    }
    let mu = mu_by_search();
    Check::new(
        worst_free < 1e-10 && worst_dec < 1e-10 && (mu - 0.1619).abs() < 1e-3 && (MU - mu).abs() < 1e-3,
        format!("τ² rel. err {worst_free:.1e}, decohered rel. err {worst_dec:.1e}, μ = {mu:.5}"),
    )
}

// ---------------------------------------------------------------- bounds

pub fn criterion_bounds() -> Check {
    let ml = |t2| BoundSpec {
        regime: Regime::MeasurementLimited,
        t2_star: t2,
    };
    let tl = |t2| BoundSpec {
        regime: Regime::TimeLimited,
        t2_star: t2,
    };
    // Hand-evaluated: 2^{-2(M+1)}/3, 1/(T²+12), max{1/(0.1619·M·T₂*²+12), 2^{-2(M+1)}/3}, 1/(0.5·T·T₂*+12).
    let table: [(BoundSpec, f64, f64); 10] = [
        (ml(None), 1.0, 0.020833333333333332),
        (ml(None), 5.0, 8.138020833333333e-5),
        (ml(None), 20.0, 7.579122514774402e-14),
        (tl(None), 10.0, 1.0 / 112.0),
        (tl(None), 0.0, 1.0 / 12.0),
        (ml(Some(10.0)), 1.0, 1.0 / 28.19),
        (ml(Some(10.0)), 20.0, 1.0 / 335.8),
        (ml(Some(5.0)), 3.0, 0.0013020833333333333f64.max(1.0 / 24.1425)),
        (tl(Some(10.0)), 50.0, 1.0 / 262.0),
        (tl(Some(2.0)), 4.0, 1.0 / 16.0),
    ];
    let mut worst = 0.0f64;
    for (spec, r, expected) in table {
        worst = worst.max((dc_lower_bound(spec, r) - expected).abs() / expected);
    }
    let mut monotone = true;
    for spec in [ml(None), tl(None), ml(Some(10.0)), tl(Some(10.0))] {
        let v: Vec<f64> = (1..=100).map(|i| dc_lower_bound(spec, i as f64 * 0.5)).collect();
        monotone &= v.windows(2).all(|w| w[1] <= w[0]);
    }
    Check::new(
        worst < 1e-12 && monotone,
        format!("10 spot checks, worst rel. err {worst:.1e}; monotone on 4×100 grid: {monotone}"),
    )
}
