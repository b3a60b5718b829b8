mod common;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metrosynth::agents::{Agent, AgentParameters, OutputMap};
use metrosynth::autodiff::{Tape, Tensor};
use metrosynth::fisher::{finite_difference_scores, fisher_estimate, observed_fi};
use metrosynth::models::nv::nv_likelihood;
use metrosynth::models::{DolinarModel, NvDcModel, NvResource, SensorModel};
use metrosynth::particle_filter::{bayes_update, moments, ParticleEnsemble};
use metrosynth::simulation::{run_batch, SimulationConfig, TapeMode};

use common::Composition;

#[test]
fn bayes_update_matches_enumerated_posterior() {
    let model = NvDcModel::new(None, NvResource::Measurements).unwrap();
    let points = [0.2, 0.5, 0.9];
    let prior = [0.2, 0.3, 0.5];
    let script = [(3.0, 1i64), (7.0, -1i64)];

    let tape = Tape::new();
    let mut e = ParticleEnsemble::from_parts(
        &tape,
        Tensor::column(points.to_vec()),
        Tensor::column(prior.to_vec()),
        vec![(0.0, 1.0)],
        vec![true],
    )
    .unwrap();
    for (t, &(tau, y)) in script.iter().enumerate() {
        let control = tape.constant(Tensor::scalar(tau));
        let lik = model.likelihood(&tape, e.particles, None, control, y, t).unwrap();
        e = bayes_update(&tape, &e, lik).unwrap();
    }
    let got = tape.value_cloned(e.weights);

    let joint: Vec<f64> = points
        .iter()
        .zip(prior)
        .map(|(&w, p)| p * script.iter().map(|&(tau, y)| nv_likelihood(y, tau, w, None)).product::<f64>())
        .collect();
    let z: f64 = joint.iter().sum();
    for (j, &pj) in joint.iter().enumerate() {
        assert!((got.get(j, 0) - pj / z).abs() < 1e-12);
    }
}

#[test]
fn analytic_scores_match_finite_differences() {
    let model = NvDcModel::new(Some(10.0), NvResource::Measurements).unwrap();
    let sim = SimulationConfig {
        particles: 16,
        batch_size: 20,
        max_steps: 4,
        nu: 1.0,
        ..SimulationConfig::default()
    };
    let batch = run_batch(&model, &Agent::Pgh, &sim, 12, 0, TapeMode::Record).unwrap();
    for r in &batch.records {
        let analytic = observed_fi(r, &model).unwrap();
        let fd = finite_difference_scores(r, &model).unwrap();
        for (a, f) in analytic.scores.iter().zip(&fd) {
            let (a, f) = (r.tape.item(*a), r.tape.item(*f));
            assert!((a - f).abs() <= 1e-6 * a.abs().max(1e-3), "analytic {a} vs fd {f}");
        }
    }
}

fn min_eigenvalue(t: &Tensor) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    m.symmetric_eigen().eigenvalues.min()
}

fn assert_symmetric_psd(t: &Tensor) {
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            assert_eq!(t.get(i, j), t.get(j, i));
        }
    }
    assert!(min_eigenvalue(t) >= -1e-10);
}

#[test]
fn observed_and_pooled_fisher_information_are_psd() {
    let sim = SimulationConfig {
        particles: 24,
        batch_size: 16,
        max_steps: 4,
        nu: 1.0,
        ..SimulationConfig::default()
    };
    let nv = NvDcModel::new(Some(20.0), NvResource::Measurements).unwrap();
    let dolinar = DolinarModel::new(4).unwrap();
    let dol_agent = Agent::Constant(vec![0.3]);
    for (model, agent) in [(&nv as &dyn SensorModel, Agent::Pgh), (&dolinar as &dyn SensorModel, dol_agent)] {
        let batch = run_batch(model, &agent, &sim, 5, 0, TapeMode::Record).unwrap();
        for r in &batch.records {
            let f = observed_fi(r, model).unwrap();
            assert_symmetric_psd(&r.tape.value_cloned(f.observed));
        }
        let pooled = fisher_estimate(&batch.records, model).unwrap();
        assert_symmetric_psd(&pooled.matrix);
    }
}

#[test]
fn baselines_ignore_trainable_parameters() {
    let model = NvDcModel::new(None, NvResource::Measurements).unwrap();
    let sim = SimulationConfig {
        particles: 32,
        batch_size: 6,
        max_steps: 5,
        ..SimulationConfig::default()
    };
    let controls = |agent: &Agent| {
        run_batch(&model, agent, &sim, 3, 0, TapeMode::Forward)
            .unwrap()
            .records
            .iter()
            .flat_map(|r| r.steps.iter().map(|s| s.control_values[0].to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert!(Agent::Pgh.parameters().is_none());
    let pgh = controls(&Agent::Pgh);
    // different trainable agents never influence a baseline's rng stream or output
    let out = OutputMap::from_spec(&model.controls()[0]);
    let _ = AgentParameters::mlp(
        metrosynth::simulation::input_dim(&model),
        &[4],
        vec![out],
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert_eq!(pgh, controls(&Agent::Pgh));
}

#[test]
fn full_episodes_and_moments_are_finite_and_exact() {
    let model = NvDcModel::new(None, NvResource::Measurements).unwrap();
    let sim = SimulationConfig {
        particles: 64,
        batch_size: 8,
        max_steps: 12,
        ..SimulationConfig::default()
    };
    let batch = run_batch(&model, &Agent::Pgh, &sim, 8, 0, TapeMode::Forward).unwrap();
    for r in &batch.records {
        for s in &r.steps {
            assert!(s.estimate[0].is_finite());
        }
    }
    let tape = Tape::new();
    let e = ParticleEnsemble::from_parts(
        &tape,
        Tensor::column(vec![0.1, 0.4, 0.7]),
        Tensor::column(vec![0.2, 0.3, 0.5]),
        vec![(0.0, 1.0)],
        vec![false],
    )
    .unwrap();
    let (m, _) = moments(&tape, &e);
    assert_relative_eq!(m[0], 0.02 + 0.12 + 0.35, max_relative = 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_values_are_identical_without_recording(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, x, y) = Composition::random(&mut rng, 8);
        let recorded = {
            let tape = Tape::new();
            let xn = tape.variable(x.clone());
            let yn = tape.variable(y.clone());
            let out = c.build(&tape, xn, yn);
            tape.item(out)
        };
        prop_assert_eq!(recorded.to_bits(), c.value(&x, &y).to_bits());
    }

    #[test]
    fn stop_gradient_acts_like_a_fresh_constant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inner, x, y) = Composition::random(&mut rng, 4);
        let (outer, _, _) = {
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            Composition::random(&mut r2, 6)
        };
        prop_assume!(inner.shape() == outer.shape());
        let grads = |use_sg: bool| {
            let tape = Tape::new();
            let xn = tape.variable(x.clone());
            let yn = tape.variable(y.clone());
            let u = inner.build(&tape, xn, yn);
            let frozen = if use_sg {
                tape.stop_gradient(u)
            } else {
                let v = tape.item(u);
                tape.constant(Tensor::scalar(v))
            };
            let scaled = tape.mul(yn, frozen).unwrap();
            let out = outer.build(&tape, xn, scaled);
            let g = tape.backward(out, &[xn, yn]).unwrap();
            (g.get(xn).unwrap().clone(), g.get(yn).unwrap().clone())
        };
        let (a, b) = (grads(true), grads(false));
        for (p, q) in a.0.data().iter().chain(a.1.data()).zip(b.0.data().iter().chain(b.1.data())) {
            prop_assert!((p - q).abs() <= 1e-14 * p.abs().max(1.0));
        }
    }
}
