//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Exits 0 unless `SIMPA_ACCEPTANCE_STRICT=1`, in which case any failure
//! gives exit code 1. `SIMPA_FULL_ACCEPTANCE=1` runs the full regression
//! experiments instead of projecting their runtime.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use simpa::autodiff::{grad_through_update, Graph, InnerGradMode, NodeId, Tensor};
use simpa::calibration_metrics::{classification_reliability, ece_mce, regression_reliability, uniform_levels};
use simpa::cli_experiments::checkpoint::{self, Checkpoint};
use simpa::cli_experiments::eval::{eval_tasks, evaluate_tasks};
use simpa::cli_experiments::run::METRICS_FILE;
use simpa::cli_experiments::{run_eval, run_train, ArchConfig, EnvConfig, EvalConfig, ExperimentConfig, Mode, ModelState};
use simpa::kl_estimation::{estimate_kl_from_weights, train_discriminator, DiscriminatorLabels};
use simpa::meta_learning::{bound_trial, predict, train_step, MetaState, Predictive, TrainConfig};
use simpa::networks::{Activation, DiscriminatorState, MlpSpec};
use simpa::optim::OptimizerKind;
use simpa::pac_bound::{assemble_bound, compensated_sum, compute_r0, compute_ri, split_confidence, BoundConfig, TaskTerms};
use simpa::stochastic::{Purpose, RngStream};
use simpa::task_environments::{BlobEnv, Environment, RegressionEnv, TaskKind};

type Outcome = Result<String, String>;

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let secs = start.elapsed().as_secs_f64();
    match out {
        Ok(msg) => {
            println!("PASS  {id}. {name}: {msg} [{secs:.1}s]");
            true
        }
        Err(msg) => {
            println!("FAIL  {id}. {name}: {msg} [{secs:.1}s]");
            false
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn within_budget(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() <= limit_secs, format!("took {:.0}s, limit {limit_secs:.0}s", elapsed.as_secs_f64()))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

/// A smooth scalar function touching most differentiable ops.
fn composite(g: &mut Graph, p: NodeId, x: NodeId, w2: NodeId) -> Result<NodeId, simpa::autodiff::AutodiffError> {
    let w = g.reshape(p, &[3, 4])?;
    let h = g.matmul(x, w)?;
    let a = g.tanh(h)?;
    let b = g.sigmoid(h)?;
    let c = g.softplus(a)?;
    let d = g.mul(b, c)?;
    let o = g.matmul(d, w2)?;
    let lse = g.logsumexp_rows(o)?;
    let s = g.sum_cols(d)?;
    let sq = g.mul(s, s)?;
    let sh = g.add_scalar(sq, 1.0)?;
    let r = g.sqrt(sh)?;
    let lg = g.ln(sh)?;
    let ex = g.scale(b, -0.5)?;
    let ex = g.exp(ex)?;
    let t1 = g.mean(lse)?;
    let t2 = g.sum(r)?;
    let t3 = g.mean(lg)?;
    let t4 = g.mean(ex)?;
    let u = g.add(t1, t2)?;
    let u = g.sub(u, t3)?;
    g.add(u, t4)
}

fn fd_first_order(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p0 = random_tensor(&[12], 1.0, &mut rng);
    let x = random_tensor(&[5, 3], 1.0, &mut rng);
    let w2 = random_tensor(&[4, 2], 1.0, &mut rng);
    let eval = |p: &Tensor| -> f64 {
        let mut g = Graph::new();
        let pn = g.param(p.clone());
        let (xn, wn) = (g.constant(x.clone()), g.constant(w2.clone()));
        let out = composite(&mut g, pn, xn, wn).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let pn = g.param(p0.clone());
    let (xn, wn) = (g.constant(x.clone()), g.constant(w2.clone()));
    let out = composite(&mut g, pn, xn, wn).map_err(e)?;
    let grad = g.grad_values(out, &[pn]).map_err(e)?.remove(0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..p0.len() {
        let mut plus = p0.clone();
        plus.data_mut()[i] += h;
        let mut minus = p0.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(grad.data()[i], fd));
    }
    Ok(worst)
}

/// Squared error of a 2-4-1 tanh network with flat parameters.
fn mlp_loss(g: &mut Graph, spec: &MlpSpec, p: NodeId, x: &Tensor, y: &Tensor) -> Result<NodeId, simpa::autodiff::AutodiffError> {
    let xn = g.constant(x.clone());
    let yn = g.constant(y.clone());
    let out = spec.forward(g, p, 0, xn).map_err(|err| match err {
        simpa::Error::Autodiff(a) => a,
        other => panic!("{other}"),
    })?;
    let r = g.sub(out, yn)?;
    let sq = g.mul(r, r)?;
    g.mean(sq)
}

fn fd_second_order(seed: u64) -> Result<f64, String> {
    let spec = MlpSpec::new(vec![2, 4, 1], Activation::Tanh, Activation::Identity).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = Tensor::vector(spec.init(&mut rng));
    let xs = random_tensor(&[6, 2], 1.5, &mut rng);
    let ys = random_tensor(&[6, 1], 1.0, &mut rng);
    let xq = random_tensor(&[8, 2], 1.5, &mut rng);
    let yq = random_tensor(&[8, 1], 1.0, &mut rng);
    let step = 0.3;
    let analytic = grad_through_update(
        &theta,
        step,
        InnerGradMode::SecondOrder,
        |g, p| mlp_loss(g, &spec, p, &xs, &ys),
        |g, l| mlp_loss(g, &spec, l, &xq, &yq),
    )
    .map_err(e)?;
    let outer_after_step = |t: &Tensor| -> f64 {
        let mut g = Graph::new();
        let p = g.param(t.clone());
        let inner = mlp_loss(&mut g, &spec, p, &xs, &ys).unwrap();
        let gi = g.grad_values(inner, &[p]).unwrap().remove(0);
        let lambda = t.zip_map(&gi, |a, b| a - step * b);
        let mut g2 = Graph::new();
        let l = g2.param(lambda);
        let out = mlp_loss(&mut g2, &spec, l, &xq, &yq).unwrap();
        g2.value(out).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        let fd = (outer_after_step(&plus) - outer_after_step(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], fd));
    }
    Ok(worst)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let (mut first, mut second): (f64, f64) = (0.0, 0.0);
    for seed in 0..100 {
        first = first.max(fd_first_order(seed)?);
        second = second.max(fd_second_order(seed)?);
    }
    let msg = format!("worst relative error {first:.2e} (first order), {second:.2e} (through update)");
    ensure(first <= 1e-4, format!("first order {msg}"))?;
    ensure(second <= 1e-3, format!("second order {msg}"))?;
    within_budget(start.elapsed(), 60.0)?;
    Ok(msg)
}

// ---------------------------------------------------------------- 2

fn normal_column(mean: f64, sd: f64, n: usize, rng: &mut impl Rng) -> Tensor {
    let d = Normal::new(mean, sd).unwrap();
    Tensor::matrix(n, 1, (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

fn kl_estimate(prior: (f64, f64), posterior: (f64, f64), seed: u64) -> Result<f64, String> {
    let disc = MlpSpec::new(vec![1, 32, 32, 1], Activation::Tanh, Activation::Identity).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega0 = DiscriminatorState(disc.init(&mut rng));
    let mut brng = ChaCha8Rng::seed_from_u64(seed + 1);
    let omega = train_discriminator(&disc, &omega0, 6000, OptimizerKind::Adam, 3e-3, |_| {
        Ok((normal_column(prior.0, prior.1, 512, &mut brng), normal_column(posterior.0, posterior.1, 512, &mut brng), DiscriminatorLabels::hard(512, 512)))
    })
    .map_err(e)?;
    estimate_kl_from_weights(&disc, &omega, &normal_column(posterior.0, posterior.1, 20_000, &mut rng)).map_err(e)
}

fn gaussian_kl_oracle(q: (f64, f64), p: (f64, f64)) -> f64 {
    (p.1 / q.1).ln() + (q.1 * q.1 + (q.0 - p.0).powi(2)) / (2.0 * p.1 * p.1) - 0.5
}

fn criterion_kl() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for (q, p, quoted, seed) in [((0.0, 1.0), (1.0, 1.0), 0.5, 10), ((0.0, 1.0), (0.0, 2.0), 0.3181, 20)] {
        let truth = gaussian_kl_oracle(q, p);
        ensure((truth - quoted).abs() < 5e-5, format!("oracle {truth} disagrees with {quoted}"))?;
        let est = kl_estimate(p, q, seed)?;
        parts.push(format!("{est:.4} vs {truth:.4}"));
        ensure((est - truth).abs() <= 0.1, format!("estimate {est:.4} vs {truth:.4}"))?;
    }
    within_budget(start.elapsed(), 120.0)?;
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 3

fn criterion_bound_formulas() -> Outcome {
    let cfg = |t: usize| BoundConfig::new(0.1, 2.0, t).unwrap();
    let r0 = [
        (0.0, 2, (40f64.ln() / 2.0).sqrt(), 1.35811),
        (10.0, 2, ((10.0 + 40f64.ln()) / 2.0).sqrt(), 2.61624),
        (0.0, 101, (2020f64.ln() / 200.0).sqrt(), 0.19508),
    ];
    let ri = [
        (0.0, 15, (40.0 * 15f64.ln() / 28.0).sqrt(), 1.96694),
        (5.0, 15, ((5.0 + 40.0 * 15f64.ln()) / 28.0).sqrt(), 2.01182),
        (0.0, 2, (40.0 * 2f64.ln() / 2.0).sqrt(), 3.72364),
    ];
    let mut worst: f64 = 0.0;
    let mut quoted_misses = Vec::new();
    for (kl, t, oracle, quoted) in r0 {
        let v = compute_r0(kl, &cfg(t)).map_err(e)?;
        worst = worst.max((v - oracle).abs());
        if (v - quoted).abs() > 5e-6 {
            quoted_misses.push(format!("R0({kl},{t})={v:.6} vs {quoted}"));
        }
    }
    for (kl, m, oracle, quoted) in ri {
        let v = compute_ri(kl, m, &cfg(2)).map_err(e)?;
        worst = worst.max((v - oracle).abs());
        if (v - quoted).abs() > 5e-6 {
            quoted_misses.push(format!("Ri({kl},{m})={v:.6} vs {quoted}"));
        }
    }
    ensure(worst <= 1e-9, format!("largest deviation from scalar evaluation {worst:.2e}"))?;

    let zero = |loss: f64| TaskTerms { emp_loss: loss, vfe: 0.0, kl: 0.0, m_v: 15 };
    let b0 = assemble_bound(&[zero(0.0), zero(0.0)], 0.0, 1, &cfg(2)).map_err(e)?.bound;
    let b1 = assemble_bound(&[zero(1.0), zero(1.0)], 0.0, 1, &cfg(2)).map_err(e)?.bound;
    let sum_r = (40.0 * 15f64.ln() / 28.0).sqrt() + (40f64.ln() / 2.0).sqrt();
    ensure((b0 - sum_r).abs() <= 1e-9 && (b1 - 1.0 - sum_r).abs() <= 1e-9, format!("assembled {b0}, {b1} vs {sum_r}"))?;

    let mut cases = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fixed = [(0.1, 2.0, 2), (0.1, 10.0, 5), (0.1, 1e9, 7)];
    let random = (0..2000).map(|_| (rng.random_range(1e-6..1.0), rng.random_range(1.001..1e4), rng.random_range(2..500)));
    for (delta, tau, t) in fixed.into_iter().chain(random) {
        let c = BoundConfig::new(delta, tau, t).map_err(e)?;
        let (d0, di) = split_confidence(&c);
        let all: Vec<f64> = std::iter::once(d0).chain(di.iter().copied()).collect();
        ensure(compensated_sum(&all) == delta, format!("budget δ={delta} τ={tau} T={t} sums to {}", compensated_sum(&all)))?;
        cases += 1;
    }
    let (d0, di) = split_confidence(&cfg(2));
    ensure(d0 == 0.05 && di.iter().all(|&d| (d - 0.025).abs() < 1e-17), "δ=0.1, τ=2, T=2 split")?;
    let (d0, di) = split_confidence(&BoundConfig::new(0.1, 10.0, 5).unwrap());
    ensure((d0 - 0.01).abs() < 1e-17 && di.iter().all(|&d| (d - 0.018).abs() < 1e-16), "δ=0.1, τ=10, T=5 split")?;

    let mut msg = format!("max deviation {worst:.1e}, exact budget in {cases} configurations");
    if !quoted_misses.is_empty() {
        msg.push_str(&format!("; quoted 5-digit values off: {}", quoted_misses.join(", ")));
    }
    Ok(msg)
}

// ---------------------------------------------------------------- 4

fn small_regression_arch() -> ArchConfig {
    ArchConfig { latent_dim: 8, base_hidden: vec![16], generator_hidden: vec![32], discriminator_hidden: vec![32], encoder_hidden: vec![16] }
}

fn small_regression_train(seed: u64, iterations: u64) -> TrainConfig {
    TrainConfig {
        bound: BoundConfig::new(0.1, 2.0, 2).unwrap(),
        k_samples: 1,
        l_t: 4,
        l_v: 8,
        l_d: 16,
        eta: 2,
        alpha_t: 1e-3,
        alpha_v: 1e-3,
        nu: 1e-3,
        gamma_v: 1e-4,
        iterations,
        seed,
        ..TrainConfig::regression_default()
    }
}

fn criterion_bound_validity() -> Outcome {
    let start = Instant::now();
    let trials = 100;
    let train_iters = 10;
    let env = Environment::Regression(RegressionEnv { oracle_points: Some(10_000), ..RegressionEnv::default() });
    let arch = small_regression_arch().build(1, 1).map_err(e)?;
    let mut holds = 0;
    let mut gap_min = f64::INFINITY;
    for trial in 0..trials {
        let cfg = small_regression_train(1000 + trial, train_iters);
        let mut state = MetaState::init(&arch, &cfg).map_err(e)?;
        while state.iteration < cfg.iterations {
            train_step(&arch, &mut state, &env, &cfg).map_err(e)?;
        }
        let tasks = eval_tasks(&env, cfg.seed, cfg.tasks()).map_err(e)?;
        let t = bound_trial(&arch, &state, &tasks, &cfg, RngStream::new(cfg.seed, 0, 0, Purpose::Evaluation)).map_err(e)?;
        gap_min = gap_min.min(t.report.bound - t.oracle_loss);
        if t.holds() {
            holds += 1;
        }
    }
    let msg = format!("{holds}/{trials} trials hold at δ=0.1, smallest margin {gap_min:.3}");
    ensure(holds >= 85, msg.clone())?;
    within_budget(start.elapsed(), 1200.0)?;
    Ok(msg)
}

// ---------------------------------------------------------------- 5 & 6

struct Quality {
    simpa: simpa::cli_experiments::EvalReport,
    maml: simpa::cli_experiments::EvalReport,
}

fn full_regression_run(dir: &Path) -> Result<Quality, String> {
    let simpa_cfg = ExperimentConfig::regression_preset();
    let maml_cfg = ExperimentConfig { mode: Mode::Maml, ..ExperimentConfig::regression_preset() };
    let simpa_out = run_train(&simpa_cfg, &dir.join("simpa"), None, |_| {}).map_err(e)?;
    let maml_out = run_train(&maml_cfg, &dir.join("maml"), None, |_| {}).map_err(e)?;
    Ok(Quality { simpa: run_eval(&simpa_cfg, &simpa_out.final_state, 1000).map_err(e)?, maml: run_eval(&maml_cfg, &maml_out.final_state, 1000).map_err(e)? })
}

/// Seconds per preset meta-iteration, from a short timed run.
fn preset_iteration_secs() -> Result<f64, String> {
    let cfg = ExperimentConfig::regression_preset();
    let env = cfg.environment().map_err(e)?;
    let arch = cfg.architecture_for(&env).map_err(e)?;
    let mut state = MetaState::init(&arch, &cfg.train).map_err(e)?;
    let n = 2;
    let start = Instant::now();
    for _ in 0..n {
        train_step(&arch, &mut state, &env, &cfg.train).map_err(e)?;
    }
    Ok(start.elapsed().as_secs_f64() / n as f64)
}

fn full_run_requested() -> bool {
    std::env::var("SIMPA_FULL_ACCEPTANCE").is_ok_and(|v| v == "1")
}

fn kind_mse(r: &simpa::cli_experiments::EvalReport, kind: TaskKind) -> Option<f64> {
    r.by_kind.iter().find(|k| k.kind == kind).and_then(|k| k.mse)
}

fn criteria_quality(projection: &Result<f64, String>, quality: &Option<Result<Quality, String>>) -> (Outcome, Outcome) {
    let q = match quality {
        Some(Ok(q)) => q,
        Some(Err(err)) => return (Err(err.clone()), Err(err.clone())),
        None => {
            let msg = match projection {
                Ok(secs) => {
                    let minutes = secs * 10_000.0 * 2.0 / 60.0;
                    format!("not run: {secs:.1}s per preset iteration projects to {minutes:.0} min for both models (limit 60); set SIMPA_FULL_ACCEPTANCE=1 to run")
                }
                Err(err) => err.clone(),
            };
            return (Err(msg.clone()), Err(msg));
        }
    };
    let five = (|| {
        let sin = kind_mse(&q.simpa, TaskKind::Sinusoid).ok_or("no sinusoid tasks")?;
        let lin = kind_mse(&q.simpa, TaskKind::Linear).ok_or("no linear tasks")?;
        let (sn, mn) = (q.simpa.mean_nll.ok_or("no nll")?, q.maml.mean_nll.ok_or("no nll")?);
        let msg = format!("sinusoid MSE {sin:.3}, linear MSE {lin:.3}, NLL {sn:.3} vs baseline {mn:.3}");
        ensure(sin < 1.0 && lin < 0.5 && sn < mn, msg.clone())?;
        Ok(msg)
    })();
    let six = (|| {
        let (se, sm) = (q.simpa.ece.ok_or("no ece")?, q.simpa.mce.ok_or("no mce")?);
        let (me, mm) = (q.maml.ece.ok_or("no ece")?, q.maml.mce.ok_or("no mce")?);
        let msg = format!("ECE {se:.4} vs {me:.4}, MCE {sm:.4} vs {mm:.4}");
        ensure(se < me && sm <= mm, msg.clone())?;
        Ok(msg)
    })();
    (five, six)
}

// ---------------------------------------------------------------- 7

fn brute_force_ece_mce(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> (f64, f64) {
    let n = probs.len() as f64;
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    for b in 0..bins {
        let mut gap_sum = 0.0;
        let mut count = 0usize;
        let mut conf_sum = 0.0;
        let mut hits = 0usize;
        for (p, &l) in probs.iter().zip(labels) {
            let mut best = 0;
            for j in 1..p.len() {
                if p[j] > p[best] {
                    best = j;
                }
            }
            let c = p[best];
            let bin = ((c * bins as f64) as usize).min(bins - 1);
            if bin != b {
                continue;
            }
            count += 1;
            conf_sum += c;
            let hit = usize::from(best == l);
            hits += hit;
            gap_sum += hit as f64 - c;
        }
        if count > 0 {
            ece += gap_sum.abs() / n;
            mce = mce.max((hits as f64 / count as f64 - conf_sum / count as f64).abs());
        }
    }
    (ece, mce)
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let classes = rng.random_range(2..8);
        let bins = rng.random_range(1..20);
        let sharp = rng.random_range(0.1..10.0);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| (rng.random_range(-1.0..1.0f64) * sharp).exp()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let (ece, mce) = ece_mce(&classification_reliability(&probs, &labels, bins).map_err(e)?);
        let (be, bm) = brute_force_ece_mce(&probs, &labels, bins);
        worst = worst.max((ece - be).abs()).max((mce - bm).abs());
    }
    ensure(worst <= 1e-12, format!("ECE/MCE deviate from brute force by {worst:.2e}"))?;

    let n = 10_000;
    let mut samples = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mu: f64 = rng.random_range(-3.0..3.0);
        let sd: f64 = rng.random_range(0.2..2.0);
        let d = Normal::new(mu, sd).unwrap();
        samples.push((0..500).map(|_| d.sample(&mut rng)).collect::<Vec<f64>>());
        targets.push(d.sample(&mut rng));
    }
    let curve = regression_reliability(&samples, &targets, &uniform_levels(11)).map_err(e)?;
    let dev = curve.levels.iter().zip(&curve.observed).map(|(l, o)| (l - o).abs()).fold(0.0, f64::max);
    ensure(dev <= 0.03, format!("calibrated predictor deviates {dev:.4} from the diagonal"))?;
    Ok(format!("brute-force deviation {worst:.1e}, calibrated curve within {dev:.4} of diagonal"))
}

// ---------------------------------------------------------------- 8

fn small_experiment(iterations: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: "acceptance-determinism".into(),
        mode: Mode::Simpa,
        environment: EnvConfig::Regression(RegressionEnv::default()),
        architecture: small_regression_arch(),
        train: small_regression_train(5, iterations),
        checkpoint_every: 25,
        eval: EvalConfig { bins: 10, readout_draws: 16, curve_points: 0, oracle_points: None },
    }
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let cfg = small_experiment(100);
    let read = |dir: &Path| std::fs::read(dir.join(METRICS_FILE)).map_err(e);

    let a = run_train(&cfg, &tmp.path().join("a"), None, |_| {}).map_err(e)?;
    let b = run_train(&cfg, &tmp.path().join("b"), None, |_| {}).map_err(e)?;
    let log_a = read(&tmp.path().join("a"))?;
    ensure(log_a == read(&tmp.path().join("b"))?, "metrics logs of identical runs differ")?;
    ensure(a.final_state == b.final_state, "final states of identical runs differ")?;

    let bytes = std::fs::read(&a.checkpoint).map_err(e)?;
    let decoded = checkpoint::decode(&bytes).map_err(e)?;
    ensure(decoded.state == a.final_state && decoded.config == cfg, "decoded checkpoint differs from the trained state")?;
    ensure(checkpoint::encode(&decoded).map_err(e)? == bytes, "re-encoded checkpoint bytes differ")?;
    let maml = Checkpoint { config: cfg.clone(), state: ModelState::Maml(simpa::meta_learning::maml::MamlState::init(&cfg.architecture_for(&cfg.environment().map_err(e)?).map_err(e)?.base, &cfg.train)) };
    let mb = checkpoint::encode(&maml).map_err(e)?;
    ensure(checkpoint::decode(&mb).map_err(e)? == maml, "baseline checkpoint round trip differs")?;

    let half = small_experiment(50);
    let dir = tmp.path().join("resumed");
    run_train(&half, &dir, None, |_| {}).map_err(e)?;
    let resumed = run_train(&cfg, &dir, None, |_| {}).map_err(e)?;
    ensure(resumed.start_iteration == 50, format!("resumed from {}", resumed.start_iteration))?;
    ensure(resumed.final_state == a.final_state, "resumed state differs from uninterrupted training")?;
    ensure(read(&dir)? == log_a, "resumed metrics log differs from uninterrupted training")?;
    ensure(std::fs::read(&resumed.checkpoint).map_err(e)? == bytes, "resumed checkpoint bytes differ")?;
    Ok(format!("{} metric lines identical across runs and after resuming at 50", log_a.iter().filter(|&&c| c == b'\n').count()))
}

// ---------------------------------------------------------------- 9

fn blob_experiment() -> ExperimentConfig {
    let env = BlobEnv { n_way: 5, k_shot: 1, m_v_per_class: 5, dim: 8, center_scale: 5.0, min_center_distance: 10.0, point_std: 1.0 };
    ExperimentConfig {
        name: "acceptance-blobs".into(),
        mode: Mode::Simpa,
        environment: EnvConfig::Blobs(env),
        architecture: ArchConfig { latent_dim: 8, base_hidden: vec![], generator_hidden: vec![32], discriminator_hidden: vec![32], encoder_hidden: vec![16] },
        train: TrainConfig {
            k_samples: 1,
            l_t: 4,
            l_v: 4,
            l_d: 32,
            eta: 5,
            alpha_t: 0.3,
            alpha_v: 3e-4,
            nu: 3e-4,
            gamma_t: 1e-2,
            gamma_v: 1e-3,
            sigma_theta: 1e-8,
            iterations: 1500,
            seed: 1,
            ..TrainConfig::classification_default()
        },
        checkpoint_every: 1500,
        eval: EvalConfig { bins: 10, readout_draws: 16, curve_points: 0, oracle_points: None },
    }
}

fn criterion_classification() -> Outcome {
    let start = Instant::now();
    let cfg = blob_experiment();
    let env = cfg.environment().map_err(e)?;
    let arch = cfg.architecture_for(&env).map_err(e)?;
    let mut state = MetaState::init(&arch, &cfg.train).map_err(e)?;
    while state.iteration < cfg.train.iterations {
        train_step(&arch, &mut state, &env, &cfg.train).map_err(e)?;
    }
    let tasks = eval_tasks(&env, cfg.train.seed, 100).map_err(e)?;
    let report = evaluate_tasks(&cfg, &arch, &ModelState::Simpa(state.clone()), &tasks, true).map_err(e)?;
    let acc = report.accuracy.ok_or("no accuracy reported")?;

    let mut checked = 0;
    for (i, t) in tasks.iter().enumerate().take(20) {
        let p = predict(&arch, &state, &t.support, &t.query.x, true, &cfg.train, RngStream::new(9, 0, i as u64, Purpose::Evaluation)).map_err(e)?;
        let Predictive::Classification { probs } = p else { return Err("regression predictive for a classification task".into()) };
        for row in &probs {
            let s: f64 = row.iter().sum();
            ensure(row.len() == 5 && row.iter().all(|&q| (0.0..=1.0).contains(&q)) && (s - 1.0).abs() <= 1e-9, format!("row {row:?} is off the simplex"))?;
            checked += 1;
        }
    }
    let msg = format!("query accuracy {:.1}% over {} tasks after {} iterations, {checked} simplex rows valid", 100.0 * acc, tasks.len(), cfg.train.iterations);
    ensure(acc >= 0.9, msg.clone())?;
    within_budget(start.elapsed(), 900.0)?;
    Ok(msg)
}

fn main() -> ExitCode {
    let strict = std::env::var("SIMPA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut results = Vec::new();
    results.push(report(1, "gradient integrity", criterion_gradients));
    results.push(report(2, "KL estimator fidelity", criterion_kl));
    results.push(report(3, "bound formula oracle", criterion_bound_formulas));
    results.push(report(4, "bound validity", criterion_bound_validity));

    let projection = preset_iteration_secs();
    let quality = full_run_requested().then(|| tempfile::tempdir().map_err(e).and_then(|d| full_regression_run(d.path())));
    let (five, six) = criteria_quality(&projection, &quality);
    results.push(report(5, "regression quality", || five));
    results.push(report(6, "calibration ordering", || six));

    results.push(report(7, "metric correctness", criterion_metrics));
    results.push(report(8, "determinism and persistence", criterion_determinism));
    results.push(report(9, "classification smoke", criterion_classification));

    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    if strict && passed < results.len() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
