use motionforge::geometry::Vec3;
use motionforge::grammar::Precondition;
use motionforge::reward::{
    clip_motion_reward, direction_similarity, distance_reward, eval_precondition, match_transition,
    MatchResult, MatchThresholds,
};
use motionforge::sim::expert::{policy_action, scripted_expert, Phase, RolloutPolicy};
use motionforge::sim::{TaskId, TaskInstance, HORIZON};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fraction of expert transitions whose geometric match equals the expert's
/// stage label, plus whether matched stages never decreased.
fn expert_agreement(id: TaskId, seeds: std::ops::Range<u64>) -> (usize, usize, bool) {
    let task = TaskInstance::new(id);
    let th = MatchThresholds::default();
    let (mut agree, mut total, mut monotone) = (0, 0, true);
    for seed in seeds {
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
            if m.stage() == Some(step.stage) {
                agree += 1;
            }
            if let Some(i) = m.stage() {
                monotone &= i >= last;
                last = i;
            }
            s = s2;
        }
    }
    (agree, total, monotone)
}

#[test]
fn geometric_matcher_agrees_with_expert_labels() {
    for id in TaskId::ALL {
        let (agree, total, monotone) = expert_agreement(id, 0..20);
        let rate = agree as f64 / total as f64;
        assert!(rate >= 0.95, "{id}: agreement {rate:.3} ({agree}/{total})");
        assert!(monotone, "{id}: matched stage decreased");
    }
}

#[test]
fn expert_pickplace_rewards_rise_to_one() {
    let task = TaskInstance::new(TaskId::PickPlace);
    let th = MatchThresholds::default();
    for seed in 0..5 {
        let mut s = task.reset(seed);
        let mut rewards = Vec::new();
        for _ in 0..HORIZON {
            let step = scripted_expert(&task, &s);
            if step.phase == Phase::Done {
                break;
            }
            let s2 = task.step(&s, &step.action);
            rewards.push(clip_motion_reward(&task.spec, &s, &s2, &th).unwrap());
            s = s2;
        }
        assert_eq!(rewards.first(), Some(&0.25));
        assert_eq!(rewards.last(), Some(&1.0));
        let staged: Vec<f64> = rewards.iter().copied().filter(|r| *r > 0.0).collect();
        assert!(staged.windows(2).all(|w| w[1] >= w[0]), "seed {seed}: {staged:?}");
    }
}

#[test]
fn random_policy_earns_zero_somewhere() {
    let task = TaskInstance::new(TaskId::PickPlace);
    let th = MatchThresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = task.reset(9);
    let mut zeros = 0;
    for _ in 0..HORIZON {
        let a = policy_action(RolloutPolicy::Uniform, &task, &s, &mut rng);
        let s2 = task.step(&s, &a);
        if clip_motion_reward(&task.spec, &s, &s2, &th).unwrap() == 0.0 {
            zeros += 1;
        }
        s = s2;
    }
    assert!(zeros > 0);
}

#[test]
fn hooked_after_expert_hook_phase() {
    let task = TaskInstance::new(TaskId::DrawerOpen);
    let mut s = task.reset(1);
    for _ in 0..HORIZON {
        let step = scripted_expert(&task, &s);
        if step.phase == Phase::Transport {
            break;
        }
        s = task.step(&s, &step.action);
    }
    assert!(eval_precondition(&Precondition::Hooked("handle".into()), &s).unwrap());
}

#[test]
fn distance_reward_mostly_rises_along_expert_episodes() {
    for id in [TaskId::Reach, TaskId::PickPlace, TaskId::PushBack] {
        let task = TaskInstance::new(id);
        let (mut drops, mut total) = (0, 0);
        for seed in 0..10 {
            let mut s = task.reset(seed);
            let mut prev = distance_reward(&task, &s);
            for _ in 0..HORIZON {
                let step = scripted_expert(&task, &s);
                if step.phase == Phase::Done {
                    break;
                }
                s = task.step(&s, &step.action);
                let r = distance_reward(&task, &s);
                total += 1;
                if r < prev - 1e-12 {
                    drops += 1;
                }
                prev = r;
            }
        }
        assert!(drops as f64 <= 0.05 * total as f64, "{id}: {drops}/{total} drops");
    }
}

#[test]
fn success_implies_goal_reached() {
    let th = MatchThresholds::default();
    for id in TaskId::ALL {
        let task = TaskInstance::new(id);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..5 {
            let mut s = task.reset(seed);
            for t in 0..HORIZON {
                let policy = if t % 3 == 0 { RolloutPolicy::Uniform } else { RolloutPolicy::Expert };
                let a = policy_action(policy, &task, &s, &mut rng);
                let s2 = task.step(&s, &a);
                let m = match_transition(&task.spec, &s, &s2, &th).unwrap();
                if task.success(&s2) {
                    assert_eq!(m, MatchResult::GoalReached { index: task.spec.stage_count() });
                } else {
                    assert!(!matches!(m, MatchResult::GoalReached { .. }));
                }
                s = s2;
            }
        }
    }
}

fn nonzero_vec() -> impl Strategy<Value = Vec3> {
    (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0)
        .prop_filter("non-zero", |(x, y, z)| x.abs() + y.abs() + z.abs() > 1e-9)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #[test]
    fn cosine_stays_in_bounds(u in nonzero_vec(), v in nonzero_vec()) {
        let c = direction_similarity(u, v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn rewards_lie_on_the_stage_grid(seed in 0u64..500, steps in 1usize..40) {
        let task = TaskInstance::new(TaskId::PickPlace);
        let th = MatchThresholds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = task.reset(seed);
        for _ in 0..steps {
            let a = policy_action(RolloutPolicy::NoisyExpert(0.5), &task, &s, &mut rng);
            let s2 = task.step(&s, &a);
            let r = clip_motion_reward(&task.spec, &s, &s2, &th).unwrap();
            let n = task.spec.stage_count() as f64;
            prop_assert!(r >= 0.0);
            prop_assert!(((r * n).round() - r * n).abs() < 1e-12);
            prop_assert_eq!(r == 1.0, task.success(&s2));
            s = s2;
        }
    }
}

mod units {
    use motionforge::reward::*;
    use motionforge::geometry::Vec3;
    use motionforge::grammar::{MotionKind, Precondition};
    use motionforge::sim::TaskInstance;
    use motionforge::sim::{Action, TaskId};

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(direction_similarity(v(1., 0., 0.), v(1., 0., 0.)).unwrap(), 1.0);
        assert_eq!(direction_similarity(v(1., 0., 0.), v(0., 1., 0.)).unwrap(), 0.0);
        let c = direction_similarity(v(1., 1., 0.), v(1., 0., 0.)).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
        assert_eq!(
            direction_similarity(Vec3::ZERO, v(1., 0., 0.)),
            Err(RewardError::ZeroVector)
        );
    }

    #[test]
    fn displacement_examples() {
        let task = TaskInstance::new(TaskId::PickPlace);
        let s = task.reset(0);
        assert_eq!(displacement(&s, &s, "puck").unwrap(), Vec3::ZERO);
        let mut s2 = s.clone();
        s2.objects.get_mut("puck").unwrap().pos += v(0.01, 0., 0.);
        let d = displacement(&s, &s2, "puck").unwrap();
        assert!((d - v(0.01, 0., 0.)).norm() < 1e-15);
        assert_eq!(
            displacement(&s, &s2, "banana"),
            Err(RewardError::UnknownEntity("banana".into()))
        );
    }

    #[test]
    fn precondition_examples() {
        let task = TaskInstance::new(TaskId::PickPlace);
        let mut s = task.reset(0);
        s.gripper_pos = s.position("puck").unwrap() + v(0.01, 0., 0.);
        let near = Precondition::Near {
            a: "gripper".into(),
            b: "puck".into(),
            threshold: 0.03,
        };
        assert!(eval_precondition(&near, &s).unwrap());
        assert!(!eval_precondition(&Precondition::Grasped("puck".into()), &s).unwrap());
        assert!(eval_precondition(&Precondition::ApertureBelow(1.1), &s).unwrap());
        assert!(!eval_precondition(&Precondition::ApertureBelow(1.0), &s).unwrap());
    }

    #[test]
    fn reward_schedule() {
        let reach = MatchResult::Matched {
            index: 2,
            kind: MotionKind::Grasp,
        };
        assert_eq!(assign_reward(reach, 4), 0.5);
        assert_eq!(assign_reward(MatchResult::Unwanted, 4), 0.0);
        assert_eq!(assign_reward(MatchResult::GoalReached { index: 4 }, 4), 1.0);
    }

    #[test]
    fn zero_displacement_is_unwanted() {
        let task = TaskInstance::new(TaskId::PickPlace);
        let s = task.reset(3);
        let s2 = task.step(&s, &Action::zero());
        let th = MatchThresholds::default();
        assert_eq!(
            match_transition(&task.spec, &s, &s2, &th).unwrap(),
            MatchResult::Unwanted
        );
    }

    #[test]
    fn goal_dominates() {
        let task = TaskInstance::new(TaskId::PickPlace);
        let s = task.reset(3);
        let mut s2 = s.clone();
        let goal = s.position("goal").unwrap();
        s2.objects.get_mut("puck").unwrap().pos = goal + v(0.015, 0., 0.);
        let th = MatchThresholds::default();
        assert_eq!(
            match_transition(&task.spec, &s, &s2, &th).unwrap(),
            MatchResult::GoalReached { index: 4 }
        );
    }

    #[test]
    fn first_expert_step_is_reach() {
        let task = TaskInstance::new(TaskId::PickPlace);
        let s = task.reset(0);
        let a = motionforge::sim::expert::scripted_expert(&task, &s).action;
        let s2 = task.step(&s, &a);
        let th = MatchThresholds::default();
        assert_eq!(
            match_transition(&task.spec, &s, &s2, &th).unwrap(),
            MatchResult::Matched {
                index: 1,
                kind: MotionKind::Reach
            }
        );
        assert_eq!(clip_motion_reward(&task.spec, &s, &s2, &th).unwrap(), 0.25);
        let d = displacement(&s, &s2, "gripper").unwrap();
        assert!(d.norm() <= 0.01 + 1e-12);
    }

    #[test]
    fn mismatched_scene_is_an_error() {
        let drawer = TaskInstance::new(TaskId::DrawerOpen);
        let pp = TaskInstance::new(TaskId::PickPlace);
        let s = pp.reset(0);
        assert!(matches!(
            match_transition(&drawer.spec, &s, &s, &MatchThresholds::default()),
            Err(RewardError::SpecSceneMismatch(_))
        ));
    }

    #[test]
    fn stage_gating_blocks_skipping_ahead() {
        let task = TaskInstance::new(TaskId::PickPlace);
        let th = MatchThresholds::default();
        let mut s = task.reset(2);
        s.gripper_pos = s.position("puck").unwrap();
        s.attached = Some("puck".into());
        let toward_goal = (s.position("goal").unwrap() - s.gripper_pos)
            .normalized()
            .unwrap();
        let s2 = task.step(&s, &Action::new(toward_goal, 0.0));
        assert_eq!(
            match_transition(&task.spec, &s, &s2, &th).unwrap().stage(),
            Some(3)
        );
        let mut tracker = StageTracker::new();
        // Only stages up to 1 are open at the start of an episode; the move
        // toward the goal is not a reach toward the puck either.
        let gated = tracker.observe(&task.spec, &s, &s2, &th).unwrap();
        assert_eq!(gated.stage(), None);
    }

    #[test]
    fn distance_reward_examples() {
        let task = TaskInstance::new(TaskId::PickPlace);
        let mut s = task.reset(0);
        let goal = s.position("goal").unwrap();
        s.gripper_pos = goal;
        s.objects.get_mut("puck").unwrap().pos = goal;
        s.attached = Some("puck".into());
        assert!((distance_reward(&task, &s) - HOLD_BONUS).abs() < 1e-12);

        // Mirror the scene through the goal: rewards agree.
        let mut a = task.reset(0);
        a.attached = None;
        a.gripper_pos = goal + v(0.1, 0.05, 0.);
        a.objects.get_mut("puck").unwrap().pos = goal + v(0.03, -0.02, 0.);
        let mut b = a.clone();
        b.gripper_pos = goal - v(0.1, 0.05, 0.);
        b.objects.get_mut("puck").unwrap().pos = goal - v(0.03, -0.02, 0.);
        assert!((distance_reward(&task, &a) - distance_reward(&task, &b)).abs() < 1e-12);
    }
}
