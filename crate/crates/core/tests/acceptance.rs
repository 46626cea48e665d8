//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use leapflow::autodiff::{Tape, Tensor};
use leapflow::flow::leap::leap_predict;
use leapflow::flow::model::{Condition, ConstantField, NetSpec, ScalarLinearField, VelocityModel, VelocityNet};
use leapflow::flow::sampling::{sample_trajectory, SampleSettings};
use leapflow::flow::{pretrain, MixtureSpec, PretrainConfig, Scheduler};
use leapflow::oracle::{
    closed_form_sweep, gradient_norm_probe, is_convex_on_grid, randomized_net, verify_generic_reduction, zero_discount_equivalence,
    JacobianSource, LeapCase,
};
use leapflow::posttrain::config::{FineTuneConfig, Method};
use leapflow::posttrain::leap_trajectory::{build_leap_trajectory, similarity_weight, ChainOptions};
use leapflow::posttrain::methods::{drtune_train_steps, BatchPlan, MethodDraws, Trainer};
use leapflow::posttrain::optim::AdamWConfig;
use leapflow::posttrain::config::SimilarityMode;
use leapflow::posttrain::{finetune_run, EvalSpec};
use leapflow::reward::{hinge_loss, RewardSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn report(id: &str, pass: bool, detail: String, elapsed: Duration, budget: Duration) {
    let within = elapsed <= budget;
    let line = format!(
        "{id} {}: {detail} [{:.2}s of {:.0}s budget]\n",
        if pass && within { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    // Written past the harness's output capture so passing criteria show up too.
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "{id}: {detail}");
    assert!(within, "{id}: exceeded time budget");
}

fn two_mode_model() -> &'static VelocityNet {
    static MODEL: OnceLock<VelocityNet> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut net = VelocityNet::new(NetSpec::new(2, 2, vec![64, 64, 64]), 0).unwrap();
        let cfg = PretrainConfig { iterations: 5000, ..Default::default() };
        pretrain(&mut net, &MixtureSpec::two_modes(), &cfg, &Scheduler::Rectified).unwrap();
        net
    })
}

/// Quadrant mixture where each condition lands in its own quadrant with
/// probability `P_CORRECT` and in each other quadrant with the remainder
/// split evenly.
const P_CORRECT: f64 = 0.4;

fn quadrant_model() -> VelocityNet {
    let mut net = VelocityNet::new(NetSpec::new(2, 4, vec![64, 64, 64]), 0).unwrap();
    let mut data = MixtureSpec::quadrants();
    let other = (1.0 - P_CORRECT) / 3.0;
    data.condition_weights =
        Some((0..4).map(|c| (0..4).map(|m| if m == c { P_CORRECT } else { other }).collect()).collect());
    let cfg = PretrainConfig { iterations: 5000, ..Default::default() };
    pretrain(&mut net, &data, &cfg, &Scheduler::Rectified).unwrap();
    net
}

fn frozen_plan(trainer: &Trainer<'_>, seed: u64) -> BatchPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (conds, noise) = trainer.draw_inputs(trainer.cfg.batch, &mut rng);
    trainer.plan_batch(&conds, &noise, &mut rng).unwrap()
}

#[test]
fn a1_closed_form_gradient() {
    const LINEAR_TOL: f64 = 1e-10;
    const FD_TOL: f64 = 1e-4;
    let start = Instant::now();
    let linear = closed_form_sweep(20, &[], JacobianSource::Analytic, 101).unwrap();
    let tanh = closed_form_sweep(20, &[4], JacobianSource::FiniteDifference { h: 1e-5 }, 202).unwrap();
    report(
        "A1",
        linear <= LINEAR_TOL && tanh <= FD_TOL,
        format!("20 linear nets: max rel err {linear:.2e} (tol {LINEAR_TOL:e}); 20 tanh nets with FD Jacobians: {tanh:.2e} (tol {FD_TOL:e})"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn a2_discount_semantics() {
    const AFFINE_TOL: f64 = 1e-10;
    let start = Instant::now();
    let net = randomized_net(NetSpec::new(2, 2, vec![16]), 5).unwrap();
    let reward = RewardSpec::mode_proximity(vec![vec![-2.0, 1.0], vec![2.0, 1.0]], 1.0);
    let s = Scheduler::Rectified;
    let mut worst: f64 = 0.0;
    for nested_only in [false, true] {
        let base = FineTuneConfig { nested_only, steps: 25, batch: 16, lambda: Some(2.0), ..Default::default() };
        let plan = frozen_plan(&Trainer::new(&net, &base, &reward, &s), 3);
        let grad = |alpha: f64| -> Vec<f64> {
            let cfg = FineTuneConfig { alpha, ..base.clone() };
            let out = Trainer::new(&net, &cfg, &reward, &s).run_plan(&plan).unwrap();
            out.grads.into_iter().flatten().collect()
        };
        let (g0, g1) = (grad(0.0), grad(1.0));
        let scale = g0.iter().chain(&g1).map(|v| v.abs()).fold(0.0, f64::max);
        for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
            for (i, ga) in grad(alpha).into_iter().enumerate() {
                worst = worst.max((ga - (g0[i] + alpha * (g1[i] - g0[i]))).abs() / scale);
            }
        }
    }
    let field = ScalarLinearField::new(0.5, 1);
    let case = LeapCase { x_k: vec![2.0], x_j: vec![1.0], k: 0.8, j: 0.3, condition: Condition::Label(0) };
    let detached_gap = zero_discount_equivalence(&field, &case, 1.0).unwrap();
    report(
        "A2",
        worst <= AFFINE_TOL && detached_gap == 0.0,
        format!("affine residual {worst:.2e} (tol {AFFINE_TOL:e}); alpha=0 vs input-detached gap {detached_gap:e} (exact)"),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

/// Window of the moving average over train reward.
const MA_WINDOW: usize = 20;

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[test]
fn a3_reward_improvement() {
    const MIN_GAIN: f64 = 0.30;
    const MA_TOL: f64 = 0.0;
    let net = two_mode_model();
    let start = Instant::now();
    let reward = RewardSpec::mode_proximity(vec![vec![-2.0, 1.0], vec![2.0, 1.0]], 1.0);
    let cfg = FineTuneConfig {
        optimizer: AdamWConfig { lr: 1e-4, ..Default::default() },
        train_pool_batches: Some(20),
        ..Default::default()
    };
    assert_eq!((cfg.alpha, cfg.tau, cfg.steps, cfg.batch, cfg.iterations), (0.3, 0.1, 25, 64, 300));
    let out = finetune_run(net, &Scheduler::Rectified, &cfg, &reward, &EvalSpec::default(), &mut ()).unwrap();
    let base = out.evals.first().unwrap().raw.reward_mean;
    let last = out.evals.last().unwrap();
    let gain = last.raw.reward_mean / base - 1.0;
    let train: Vec<f64> = out.train.iter().map(|r| r.reward_mean).collect();
    let ma = moving_average(&train, MA_WINDOW);
    // ma[i] ends at train index i + MA_WINDOW - 1; check every step whose
    // window ends inside the final two-thirds.
    let first_checked = (train.len() / 3 + 1).saturating_sub(MA_WINDOW - 1);
    let drops: Vec<f64> = ma[first_checked..].windows(2).map(|w| w[1] - w[0]).filter(|d| *d < -MA_TOL).collect();
    let worst_drop = drops.iter().copied().fold(0.0, f64::min);
    report(
        "A3",
        gain >= MIN_GAIN && drops.is_empty(),
        format!(
            "eval reward {base:.4} -> {:.4} (ema {:.4}), gain {:.1}% (min {:.0}%); MA{MA_WINDOW} decreases in final two-thirds: {} (worst {worst_drop:.2e})",
            last.raw.reward_mean,
            last.ema.reward_mean,
            100.0 * gain,
            100.0 * MIN_GAIN,
            drops.len()
        ),
        start.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn a4_early_step_advantage() {
    const SEEDS: u64 = 5;
    let start = Instant::now();
    let net = quadrant_model();
    let reward = RewardSpec::compositional(RewardSpec::quadrant_signs(), 1.0);
    let eval = EvalSpec { interval: 0, guidance: 1.0, ..Default::default() };
    let shared = FineTuneConfig {
        optimizer: AdamWConfig { lr: 1e-4, ..Default::default() },
        iterations: 150,
        guidance: 1.0,
        ..Default::default()
    };
    let variants = [
        FineTuneConfig { t_range: [0.0, 1.0], ..shared.clone() },
        FineTuneConfig { t_range: [0.0, 0.5], ..shared.clone() },
        FineTuneConfig { method: Method::Refl, ..shared.clone() },
    ];
    let accuracy: Vec<Vec<f64>> = variants
        .iter()
        .map(|v| {
            (0..SEEDS)
                .map(|seed| {
                    let cfg = FineTuneConfig { seed, ..v.clone() };
                    let out = finetune_run(&net, &Scheduler::Rectified, &cfg, &reward, &eval, &mut ()).unwrap();
                    out.evals.last().unwrap().raw.accuracy.unwrap()
                })
                .collect()
        })
        .collect();
    let margin = |other: usize| (0..SEEDS as usize).map(|s| accuracy[0][s] - accuracy[other][s]).sum::<f64>() / SEEDS as f64;
    let wins = |other: usize| (0..SEEDS as usize).filter(|&s| accuracy[0][s] >= accuracy[other][s]).count();
    let (m_half, m_refl) = (margin(1), margin(2));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    report(
        "A4",
        m_half > 0.0 && m_refl > 0.0,
        format!(
            "accuracy over {SEEDS} seeds: t_range [0,1] {:.4}, [0,1/2] {:.4}, ReFL {:.4}; mean margins {m_half:+.4} ({}/{SEEDS} seeds >=), {m_refl:+.4} ({}/{SEEDS} seeds >=)",
            mean(&accuracy[0]),
            mean(&accuracy[1]),
            mean(&accuracy[2]),
            wins(1),
            wins(2)
        ),
        start.elapsed(),
        Duration::from_secs(1800),
    );
}

#[test]
fn a5_leap_exactness() {
    const GENERIC_TOL: f64 = 1e-12;
    let start = Instant::now();
    let field = ConstantField::new(&[1.0, -0.5]);
    let tape = Tape::inert();
    let settings = SampleSettings { steps: 16, guidance: 1.0 };
    let traj = sample_trajectory(&field, &tape, &[], Condition::Label(0), Tensor::row(&[0.25, 0.75]), settings, &[]).unwrap();
    let mut mismatches = 0;
    for k in 1..=16 {
        for j in 0..k {
            let v = traj.velocity_at(k);
            let leap = leap_predict(&tape, &traj.latents[k], traj.timesteps[k], traj.timesteps[j], v, &Scheduler::Rectified).unwrap();
            if leap.data() != traj.latents[j].data() {
                mismatches += 1;
            }
        }
    }
    let generic = verify_generic_reduction(1000, 5).unwrap();
    report(
        "A5",
        mismatches == 0 && generic <= GENERIC_TOL,
        format!("constant-field leaps differing from Euler: {mismatches} of 136 (bitwise); generic vs fast max err {generic:.2e} over 1000 trials (tol {GENERIC_TOL:e})"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn a6_straight_through_and_weighting() {
    let start = Instant::now();
    let net = randomized_net(NetSpec::new(2, 2, vec![8]), 6).unwrap();
    let settings = SampleSettings { steps: 25, guidance: 3.5 };
    let traj = sample_trajectory(&net, &Tape::inert(), net.params(), Condition::Label(1), Tensor::row(&[0.4, -1.2]), settings, &[])
        .unwrap();
    let tape = Tape::new();
    let params = net.bind(&tape);
    let opts = ChainOptions { alpha: 0.3, nested_only: false, guidance: 3.5 };
    let lt = build_leap_trajectory(&net, &tape, &params, &traj, &[22, 9, 0], opts, &Scheduler::Rectified).unwrap();
    let bitwise = lt.connected.iter().zip(&lt.anchors[1..]).all(|(c, &a)| c.data() == traj.latents[a].data());

    let reward = RewardSpec::mode_proximity(vec![vec![-2.0, 1.0], vec![2.0, 1.0]], 1.0);
    let s = Scheduler::Rectified;
    let cfg = FineTuneConfig { steps: 25, batch: 8, lambda: Some(2.0), ..Default::default() };
    let trainer = Trainer::new(&net, &cfg, &reward, &s);
    let plan = frozen_plan(&trainer, 1);
    let invariant = plan.items.iter().all(|item| {
        let computed = trainer.run_item(item, None).unwrap();
        trainer.run_item(item, Some(computed.weight)).unwrap().grads == computed.grads
    });

    let mut all_zero = true;
    for method in Method::ALL {
        let c = FineTuneConfig { method, lambda: Some(-1.0), early_stop_window: 11, ..cfg.clone() };
        let t = Trainer::new(&net, &c, &reward, &s);
        let out = t.run_plan(&frozen_plan(&t, 2)).unwrap();
        all_zero &= out.grads.iter().flatten().all(|&g| g == 0.0);
    }
    let hinge_tape = Tape::new();
    let r = hinge_tape.leaf(&Tensor::scalar(0.7));
    let h = hinge_loss(&hinge_tape, &r, 0.55).unwrap();
    let hinge_grad = hinge_tape.backward(&h).unwrap().get_or_zero(&r)[0];

    let w = similarity_weight(&[0.0, 0.0], 0.1, SimilarityMode::Both);
    report(
        "A6",
        bitwise && invariant && all_zero && hinge_grad == 0.0 && w == 5.0,
        format!(
            "connected == rollout bitwise: {bitwise}; detached-weight invariance: {invariant}; zero grads when r >= lambda (4 methods): {all_zero}; w_sim(0,0;0.1) = {w}"
        ),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn a7_baseline_fidelity() {
    let start = Instant::now();
    let train = drtune_train_steps(25, 2, 3);
    let net = randomized_net(NetSpec::new(2, 2, vec![8]), 7).unwrap();
    let reward = RewardSpec::mode_proximity(vec![vec![-2.0, 1.0], vec![2.0, 1.0]], 1.0);
    let s = Scheduler::Rectified;
    let cfg = FineTuneConfig { method: Method::Refl, steps: 25, batch: 1, early_stop_window: 11, lambda: Some(2.0), ..Default::default() };
    let trainer = Trainer::new(&net, &cfg, &reward, &s);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..500 {
        let (conds, noise) = trainer.draw_inputs(1, &mut rng);
        if let MethodDraws::Refl { t_min } = trainer.plan_batch(&conds, &noise, &mut rng).unwrap().items[0].draws {
            seen.insert(t_min);
        }
    }
    let window_ok = seen == (1..=11).collect();

    let dcfg = FineTuneConfig { method: Method::DraftLv, renoise_steps: 0, batch: 4, ..cfg.clone() };
    let dtrainer = Trainer::new(&net, &dcfg, &reward, &s);
    let mut last_step_ok = true;
    for item in frozen_plan(&dtrainer, 4).items {
        let out = dtrainer.run_item(&item, None).unwrap();
        let traj = sample_trajectory(
            &net,
            &Tape::inert(),
            net.params(),
            item.condition,
            item.noise.clone(),
            SampleSettings { steps: 25, guidance: dcfg.guidance },
            &[],
        )
        .unwrap();
        let tape = Tape::new();
        let params = net.bind(&tape);
        let x1 = traj.latents[1].detach();
        let v = leapflow::flow::sampling::cfg_velocity(&net, &tape, &params, &x1, &[traj.timesteps[1]], &[item.condition], dcfg.guidance)
            .unwrap();
        let x0 = tape.sub(&x1, &tape.scale(&v, traj.dt(1)).unwrap()).unwrap();
        let loss = hinge_loss(&tape, &reward.reward(&tape, &x0, item.condition).unwrap(), 2.0).unwrap();
        last_step_ok &= tape.backward(&loss).unwrap().collect(&params) == out.grads;
    }
    report(
        "A7",
        train == vec![3, 15] && window_ok && last_step_ok,
        format!("DRTune t_train(T=25,K=2,s=3) = {train:?}; ReFL t_min values seen = {seen:?}; DRaFT-LV n=0 equals last-step gradient: {last_step_ok}"),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn a8_gradient_norm_ordering() {
    const CONVEX_TOL: f64 = 1e-9;
    let net = two_mode_model();
    let start = Instant::now();
    let reward = RewardSpec::mode_proximity(vec![vec![-2.0, 1.0], vec![2.0, 1.0]], 1.0);
    let s = Scheduler::Rectified;
    let cfg = FineTuneConfig { nested_only: true, ..Default::default() };
    let trainer = Trainer::new(net, &cfg, &reward, &s);
    let plans: Vec<BatchPlan> = (0..4).map(|i| frozen_plan(&trainer, 100 + i)).collect();
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let norms = gradient_norm_probe(net, &cfg, &reward, &s, &plans, &grid).unwrap();
    let at_03 = gradient_norm_probe(net, &cfg, &reward, &s, &plans, &[0.3]).unwrap()[0];
    let at_1 = norms[4];
    let convex = is_convex_on_grid(&norms, CONVEX_TOL);
    report(
        "A8",
        at_1 >= at_03 && at_03 >= 0.0 && convex,
        format!(
            "nested-only grad norm at alpha 1 = {at_1:.4e}, 0.3 = {at_03:.4e}; grid {:?} convex: {convex}",
            norms.iter().map(|n| format!("{n:.4e}")).collect::<Vec<_>>()
        ),
        start.elapsed(),
        Duration::from_secs(30),
    );
}
