//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. `ACCEPTANCE_ONLY=1,4,9` restricts the run to
//! the listed criteria; by default all nine run (the RL ones take about an
//! hour and a half on one core).

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use motionforge::grammar::{parse_task_spec, serialize_task_spec, MotionKind};
use motionforge::matcher::{
    argmax, collect_dataset, contrastive_loss, predict_probabilities, train_matcher, CollectConfig, MatcherModel,
    MatcherTrainConfig, MotionTable, Temperature,
};
use motionforge::nn::{channel_expand, finite_difference, max_relative_error, Conv2d, MapShape, ParamSet};
use motionforge::reward::{assign_reward, clip_motion_reward, match_transition, MatchResult, MatchThresholds};
use motionforge::rl::{actor_loss, critic_loss, td_target, train_run, AgentParams, Batch, MetricsRow, RewardBackend, RunEnv, TrainConfig};
use motionforge::sim::expert::{scripted_expert, Phase};
use motionforge::sim::{Action, TaskId, TaskInstance, HORIZON};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn channel_expansion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let conv = Conv2d::new(3, 8, 3, 2, 1, &mut rng);
        let s = MapShape {
            batch: 1,
            height: 16,
            width: 16,
            channels: 3,
        };
        let x = Array2::from_shape_fn((256, 3), |_| rng.random_range(0.0..1.0));
        let doubled = Array2::from_shape_fn((256, 6), |(r, j)| x[[r, j % 3]]);
        let (y, _) = conv.forward(&x, s);
        let (y2, _) = channel_expand(&conv, 2).forward(&doubled, MapShape { channels: 6, ..s });
        for (a, b) in y.iter().zip(y2.iter()) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-12));
        }
    }
    outcome(worst < 1e-6, format!("max relative error {worst:.2e} over 100 draws"))
}

fn reward_schedule() -> Outcome {
    let spec = parse_task_spec(TaskId::PickPlace.spec_source()).unwrap();
    let n = spec.stage_count();
    let mut got: Vec<f64> = spec
        .motions
        .iter()
        .map(|m| assign_reward(MatchResult::Matched { index: m.index, kind: m.kind }, n))
        .collect();
    got.push(assign_reward(MatchResult::GoalReached { index: n }, n));
    let unwanted = assign_reward(MatchResult::Unwanted, n);

    // The same values come out of real transitions.
    let task = TaskInstance::new(TaskId::PickPlace);
    let th = MatchThresholds::default();
    let mut seen = BTreeSet::new();
    let mut s = task.reset(0);
    for _ in 0..HORIZON {
        let s2 = task.step(&s, &scripted_expert(&task, &s).action);
        seen.insert(clip_motion_reward(&task.spec, &s, &s2, &th).unwrap().to_bits());
        if task.success(&s2) {
            break;
        }
        s = s2;
    }
    let start = task.reset(0);
    let idle = clip_motion_reward(&task.spec, &start, &task.step(&start, &Action::zero()), &th).unwrap();
    let expected = [0.25, 0.5, 0.75, 1.0];
    let from_episode: Vec<f64> = seen.iter().map(|b| f64::from_bits(*b)).collect();
    let pass = n == 4
        && spec.motions.iter().map(|m| m.kind).collect::<Vec<_>>() == [MotionKind::Reach, MotionKind::Grasp, MotionKind::MoveTo]
        && got == expected
        && unwanted == 0.0
        && from_episode.iter().all(|r| expected.contains(r))
        && from_episode.contains(&1.0)
        && idle == 0.0;
    outcome(pass, format!("stages {got:?}, unwanted {unwanted}, expert episode {from_episode:?}, idle step {idle}"))
}

fn oracle_agreement() -> Outcome {
    let th = MatchThresholds::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for id in TaskId::ALL {
        let task = TaskInstance::new(id);
        let (mut agree, mut total, mut monotone) = (0usize, 0usize, true);
        for seed in 0..20 {
            let mut s = task.reset(seed);
            let mut last = 0;
            for _ in 0..HORIZON {
                let step = scripted_expert(&task, &s);
                if step.phase == Phase::Done {
                    break;
                }
                let s2 = task.step(&s, &step.action);
                let m = match_transition(&task.spec, &s, &s2, &th).unwrap();
                total += 1;
                agree += usize::from(m.stage() == Some(step.stage));
                if let Some(i) = m.stage() {
                    monotone &= i >= last;
                    last = i;
                }
                s = s2;
            }
        }
        let rate = agree as f64 / total as f64;
        pass &= rate >= 0.95 && monotone;
        parts.push(format!("{id} {rate:.3}{}", if monotone { "" } else { " (non-monotone)" }));
    }
    outcome(pass, parts.join(", "))
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, obs_dim: usize) -> Batch {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    Batch {
        obs: Array2::from_shape_fn((n, obs_dim), |_| u(-1.0, 1.0)),
        actions: Array2::from_shape_fn((n, 4), |_| u(-1.0, 1.0)),
        rewards: Array1::from_shape_fn(n, |_| u(0.0, 1.0)),
        next_obs: Array2::from_shape_fn((n, obs_dim), |_| u(-1.0, 1.0)),
        done: Array1::from_shape_fn(n, |i| (i % 3 == 0) as u8 as f64),
    }
}

// Central-difference steps. At 1e-4 the O(h^2) truncation error on the
// smallest critic gradients is near 1e-4 relative, so the RL losses use 1e-5.
// The contrastive loss sums over many more terms and its roundoff dominates
// below 1e-4.
const FD_STEP: f64 = 1e-5;
const FD_STEP_CONTRASTIVE: f64 = 1e-4;

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut critic, mut actor, mut contrastive): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for trial in 0..20 {
        let agent = AgentParams::new(5, 3, 6, trial);
        let batch = random_batch(&mut rng, 8, 5);
        let y = td_target(&agent, &batch, 0.9, false);
        let (_, g) = critic_loss(&agent, &batch, &y);
        let numeric = finite_difference(&agent.critic, FD_STEP, |c| {
            let probe = AgentParams {
                critic: c.clone(),
                ..agent.clone()
            };
            critic_loss(&probe, &batch, &y).0
        });
        critic = critic.max(max_relative_error(&g.flat(), &numeric));

        let (_, g) = actor_loss(&agent, &batch, 1e-3);
        let numeric = finite_difference(&agent.actor, FD_STEP, |a| {
            let probe = AgentParams {
                actor: a.clone(),
                ..agent.clone()
            };
            actor_loss(&probe, &batch, 1e-3).0
        });
        actor = actor.max(max_relative_error(&g.flat(), &numeric));
    }
    let task = TaskInstance::new(TaskId::PickPlace);
    for trial in 0..20 {
        let mut model = MatcherModel::new(&task.spec, 8, trial);
        model.log_tau[0] = rng.random_range(-1.0..0.5);
        let x = Array2::from_shape_fn((2 * 64, 6), |_| rng.random_range(0.0..1.0));
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..5)).collect();
        let out = contrastive_loss(&model, &x, &labels);
        let numeric = finite_difference(&model, FD_STEP_CONTRASTIVE, |m| contrastive_loss(m, &x, &labels).loss);
        contrastive = contrastive.max(max_relative_error(&out.grads.flat(), &numeric));
    }
    outcome(
        critic < 1e-4 && actor < 1e-4 && contrastive < 1e-4,
        format!("max relative error: critic {critic:.2e}, actor {actor:.2e}, contrastive {contrastive:.2e} (20 instances each)"),
    )
}

fn probability_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_sum, mut flips): (f64, usize) = (0.0, 0);
    for _ in 0..1000 {
        let d = rng.random_range(2..32);
        let k = rng.random_range(1..10);
        let f: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
        let f = &f / f.dot(&f).sqrt();
        let table = MotionTable {
            w: Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..1.0)),
            descriptions: vec![String::new(); k],
        };
        let p1 = predict_probabilities(&f, &table, Temperature { log_tau: rng.random_range(-4.0..2.0) });
        let p2 = predict_probabilities(&f, &table, Temperature { log_tau: rng.random_range(-4.0..2.0) });
        worst_sum = worst_sum.max((p1.iter().sum::<f64>() - 1.0).abs());
        flips += usize::from(argmax(&p1) != argmax(&p2));
    }
    outcome(
        worst_sum < 1e-6 && flips == 0,
        format!("max |sum - 1| {worst_sum:.2e}, argmax changes under temperature {flips}/1000"),
    )
}

fn matcher_quality() -> Outcome {
    let task = TaskInstance::new(TaskId::PickPlace);
    let collect = CollectConfig::default();
    let samples = collect_dataset(&task, &collect).unwrap();
    let cfg = MatcherTrainConfig::default();
    let (_, m) = train_matcher(&samples, &task.spec, collect.resolution, &cfg, |_| {}).unwrap();
    let ln_k = (m.classes as f64).ln();
    let init_gap = (m.initial_loss - ln_k).abs() / ln_k;
    let acc = m.final_accuracy();
    outcome(
        samples.len() == 10_000 && m.heldout_samples == 2_000 && acc >= 0.90 && init_gap <= 0.05,
        format!(
            "held-out accuracy {acc:.3} on {} samples after {} epochs; initial loss {:.4} vs ln K {ln_k:.4} ({:.1}% off)",
            m.heldout_samples,
            cfg.epochs,
            m.initial_loss,
            100.0 * init_gap
        ),
    )
}

/// RL settings sized for one CPU core; everything else is the default.
fn desk_rl(backend: RewardBackend) -> TrainConfig {
    TrainConfig {
        backend,
        total_steps: 200_000,
        hidden: 64,
        encoder_dim: 32,
        batch: 128,
        updates_per_episode: 50,
        workers: 1,
        ..Default::default()
    }
}

fn final_successes(task: TaskId, backend: RewardBackend) -> Vec<f64> {
    let cfg = desk_rl(backend);
    let env = RunEnv::new(TaskInstance::new(task), &cfg);
    (0..3)
        .map(|seed| train_run(&env, &cfg, seed, None, |_| Ok(())).unwrap().final_success())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn reach_success() -> Outcome {
    let s = final_successes(TaskId::Reach, RewardBackend::ClipMotionState);
    let m = mean(&s);
    outcome(m >= 0.8, format!("mean final success {m:.3} over seeds {s:?} at 200K steps"))
}

fn drawer_superiority() -> Outcome {
    let clip = final_successes(TaskId::DrawerOpen, RewardBackend::ClipMotionState);
    let dist = final_successes(TaskId::DrawerOpen, RewardBackend::Distance);
    let (c, d) = (mean(&clip), mean(&dist));
    outcome(
        c >= d,
        format!("clip_motion_state {c:.3} {clip:?} vs distance {d:.3} {dist:?}, gap {:+.3}", c - d),
    )
}

fn determinism_and_formats() -> Outcome {
    let cfg = TrainConfig {
        total_steps: 3_000,
        eval_interval: 1_000,
        eval_episodes: 4,
        warmup_steps: 500,
        batch: 32,
        updates_per_episode: 5,
        hidden: 16,
        encoder_dim: 8,
        workers: 1,
        ..Default::default()
    };
    let csv = || {
        let env = RunEnv::new(TaskInstance::new(TaskId::PickPlace), &cfg);
        let mut text = format!("{}\n", MetricsRow::CSV_HEADER);
        train_run(&env, &cfg, 11, None, |r| {
            text.push_str(&r.to_csv());
            text.push('\n');
            Ok(())
        })
        .unwrap();
        text
    };
    let (a, b) = (csv(), csv());
    let identical = a.as_bytes() == b.as_bytes() && a.lines().count() == 4;
    let mut fixpoints = 0;
    for id in TaskId::ALL {
        let spec = parse_task_spec(id.spec_source()).unwrap();
        let text = serialize_task_spec(&spec);
        let again = parse_task_spec(&text).unwrap();
        fixpoints += usize::from(again == spec && serialize_task_spec(&again) == text);
    }
    outcome(
        identical && fixpoints == TaskId::ALL.len(),
        format!(
            "metrics CSV {} across repeated runs; DSL round-trip fixpoint on {fixpoints}/{} shipped specs",
            if identical { "bitwise identical" } else { "differs" },
            TaskId::ALL.len()
        ),
    )
}

fn main() -> ExitCode {
    // Name, check, runtime budget in seconds.
    let criteria: [(&str, fn() -> Outcome, f64); 9] = [
        ("channel expansion equivalence", channel_expansion, 1.0),
        ("pick-place reward schedule", reward_schedule, 1.0),
        ("matcher agrees with expert labels", oracle_agreement, 30.0),
        ("gradient checks", gradient_checks, 60.0),
        ("softmax probability laws", probability_laws, 5.0),
        ("contrastive matcher quality", matcher_quality, 15.0 * 60.0),
        ("reach success with clip_motion_state", reach_success, 30.0 * 60.0),
        ("drawer-open: clip_motion_state vs distance", drawer_superiority, 60.0 * 60.0),
        ("determinism and DSL round trip", determinism_and_formats, 10.0),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        let pass = o.pass && secs <= *budget;
        failed += usize::from(!pass);
        println!(
            "criterion {number} {}: {name}: {} [{secs:.1}s of {budget:.0}s allowed]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
