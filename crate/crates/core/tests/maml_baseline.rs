use simpa::autodiff::Tensor;
use simpa::meta_learning::{maml, TrainConfig};
use simpa::networks::{Activation, MlpSpec};
use simpa::stochastic::{Purpose, RngStream};
use simpa::task_environments::{Environment, RegressionEnv, Split, TaskKind, TaskMix, Targets};

fn mse(base: &MlpSpec, w: &[f64], s: &Split) -> f64 {
    let out = maml::forward(base, w, &s.x).unwrap();
    let Targets::Values(y) = &s.y else { unreachable!() };
    out.data().iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64
}

#[test]
fn adaptation_reduces_query_error_on_sinusoids() {
    let base = MlpSpec::new(vec![1, 40, 40, 1], Activation::Relu, Activation::Identity).unwrap();
    let env = Environment::Regression(RegressionEnv { mix: TaskMix::Sinusoid, ..RegressionEnv::default() });
    let cfg = TrainConfig { eta: 5, alpha_t: 2e-3, alpha_v: 1e-3, iterations: 10_000, seed: 21, ..TrainConfig::regression_default() };
    let mut state = maml::MamlState::init(&base, &cfg);
    maml::train(&base, &mut state, &env, &cfg, |_, _| Ok(())).unwrap();
    assert!(state.is_finite());

    let mut improved = 0;
    let mut seen = 0;
    let mut j = 0u64;
    while seen < 100 {
        let task = env.sample_task(&mut RngStream::new(99, 0, j, Purpose::Test).rng()).unwrap();
        j += 1;
        assert_eq!(task.kind, TaskKind::Sinusoid);
        seen += 1;
        let adapted = maml::adapt(&base, &state.weights, &task.support, &cfg).unwrap();
        if mse(&base, &adapted, &task.query) < mse(&base, &state.weights, &task.query) {
            improved += 1;
        }
    }
    assert!(improved >= 90, "{improved}/100 tasks improved");
}

#[test]
fn forward_matches_a_single_linear_layer() {
    let base = MlpSpec::new(vec![2, 1], Activation::Relu, Activation::Identity).unwrap();
    let out = maml::forward(&base, &[2.0, -1.0, 0.5], &Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(out.data(), &[2.0 * 3.0 - 4.0 + 0.5]);
}
