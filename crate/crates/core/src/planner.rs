//! Cross-entropy-method visual MPC over a pluggable dynamics model, and the
//! episode harness for the pushing environment.

use fitvid_tensor::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FitVid;
use crate::params::ParamStore;
use crate::pusher::{self, PusherState, ACTION_BOUND};
use crate::rollout::{predict_sequence, RolloutRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemConfig {
    pub num_samples: usize,
    pub num_elites: usize,
    pub iterations: usize,
    pub horizon: usize,
    pub replans_per_episode: usize,
    pub episode_length: usize,
    /// Per-dimension `(low, high)`.
    pub action_bounds: Vec<(f64, f64)>,
    /// Initial standard deviation as a fraction of each bound range.
    pub initial_std: f64,
    /// Lower limit on the refitted deviation, same units.
    pub min_std: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            num_elites: 20,
            iterations: 3,
            horizon: 10,
            replans_per_episode: 5,
            episode_length: 50,
            action_bounds: vec![(-ACTION_BOUND, ACTION_BOUND); 2],
            initial_std: 0.3,
            min_std: 0.01,
        }
    }
}

impl CemConfig {
    pub fn action_dim(&self) -> usize {
        self.action_bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_samples < 1 || self.num_elites < 1 || self.num_elites > self.num_samples {
            return fail("need 1 <= num_elites <= num_samples");
        }
        if self.horizon < 1 || self.horizon * self.replans_per_episode != self.episode_length {
            return fail("horizon * replans_per_episode must equal episode_length");
        }
        if self.action_bounds.is_empty() || self.action_bounds.iter().any(|(l, h)| !(l < h)) {
            return fail("every action bound needs low < high");
        }
        if !(self.initial_std > 0.0) || !(self.min_std >= 0.0) {
            return fail("deviation fractions must be positive");
        }
        Ok(())
    }
}

/// A batch-evaluable dynamics model: for each candidate action sequence
/// (`horizon * action_dim`, step-major) it returns `horizon` predicted
/// frames, flattened.
pub trait PlanDynamics<O: ?Sized>: Sync {
    fn predict(&self, obs: &O, candidates: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f32>>>;
}

impl<O: ?Sized, F> PlanDynamics<O> for F
where
    F: Fn(&O, &[Vec<f64>], usize) -> Result<Vec<Vec<f32>>> + Sync,
{
    fn predict(&self, obs: &O, candidates: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f32>>> {
        self(obs, candidates, horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    /// `horizon * action_dim`, step-major.
    pub best_actions: Vec<f64>,
    pub elite_cost_trace: Vec<f64>,
    /// Best cost seen up to and including each round.
    pub best_cost_trace: Vec<f64>,
    pub best_cost: f64,
}

/// Mean over the horizon of each frame's mean squared error to `goal`.
pub fn sequence_cost(frames: &[f32], goal: &[f32], horizon: usize) -> f64 {
    let per = goal.len();
    let total: f64 = frames
        .chunks(per)
        .take(horizon)
        .map(|f| f.iter().zip(goal).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / per as f64)
        .sum();
    total / horizon as f64
}

/// Runs `max(1, iterations)` sampling rounds, refitting a diagonal Gaussian
/// to the elites between rounds, and returns the cheapest sequence seen.
pub fn cem_plan<O: ?Sized, D: PlanDynamics<O> + ?Sized, R: Rng>(
    dynamics: &D,
    obs: &O,
    goal: &[f32],
    cfg: &CemConfig,
    rng: &mut R,
) -> Result<PlanResult> {
    cfg.validate()?;
    if goal.is_empty() {
        return Err(Error::Plan("goal image is empty".into()));
    }
    let a = cfg.action_dim();
    let dims = cfg.horizon * a;
    let range = |k: usize| cfg.action_bounds[k % a].1 - cfg.action_bounds[k % a].0;
    let mut mean: Vec<f64> = (0..dims)
        .map(|k| 0.5 * (cfg.action_bounds[k % a].0 + cfg.action_bounds[k % a].1))
        .collect();
    let mut std: Vec<f64> = (0..dims).map(|k| cfg.initial_std * range(k)).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut elite_trace = Vec::new();
    let mut best_trace = Vec::new();
    for round in 0..cfg.iterations.max(1) {
        let candidates: Vec<Vec<f64>> = (0..cfg.num_samples)
            .map(|_| {
                (0..dims)
                    .map(|k| {
                        let e: f64 = rng.sample(StandardNormal);
                        let (lo, hi) = cfg.action_bounds[k % a];
                        (mean[k] + std[k] * e).clamp(lo, hi)
                    })
                    .collect()
            })
            .collect();
        let frames = dynamics
            .predict(obs, &candidates, cfg.horizon)
            .map_err(|e| Error::Plan(format!("dynamics failed in round {round}: {e}")))?;
        if frames.len() != candidates.len() || frames.iter().any(|f| f.len() != cfg.horizon * goal.len()) {
            return Err(Error::Plan(format!(
                "dynamics returned {} sequences for {} candidates or frames of the wrong size",
                frames.len(),
                candidates.len()
            )));
        }
        let costs: Vec<f64> = par::map_slice(&frames, |f| sequence_cost(f, goal, cfg.horizon));
        if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::Plan(format!("candidate {i} has a non-finite cost in round {round}")));
        }
        let mut order: Vec<usize> = (0..costs.len()).collect();
        order.sort_by(|&i, &j| costs[i].total_cmp(&costs[j]).then(i.cmp(&j)));
        let elites = &order[..cfg.num_elites];
        elite_trace.push(elites.iter().map(|&i| costs[i]).sum::<f64>() / elites.len() as f64);
        let top = order[0];
        if best.as_ref().map_or(true, |(c, _)| costs[top] < *c) {
            best = Some((costs[top], candidates[top].clone()));
        }
        best_trace.push(best.as_ref().unwrap().0);
        for k in 0..dims {
            let m = elites.iter().map(|&i| candidates[i][k]).sum::<f64>() / elites.len() as f64;
            let v = elites.iter().map(|&i| (candidates[i][k] - m).powi(2)).sum::<f64>() / elites.len() as f64;
            mean[k] = m;
            std[k] = v.sqrt().max(cfg.min_std * range(k));
        }
    }
    let (best_cost, best_actions) = best.expect("at least one round");
    Ok(PlanResult {
        best_actions,
        elite_cost_trace: elite_trace,
        best_cost_trace: best_trace,
        best_cost,
    })
}

/// What the planner sees of an episode so far.
#[derive(Debug, Clone)]
pub struct History {
    pub states: Vec<PusherState>,
    /// Rendered frames, one per entry of `states`.
    pub frames: Vec<Vec<f32>>,
    /// Actions taken, one fewer than `states`.
    pub actions: Vec<[f64; 2]>,
    pub resolution: usize,
}

impl History {
    pub fn new(start: PusherState, resolution: usize) -> Self {
        Self {
            frames: vec![pusher::render(&start, resolution)],
            states: vec![start],
            actions: Vec::new(),
            resolution,
        }
    }

    pub fn current(&self) -> &PusherState {
        self.states.last().expect("history is never empty")
    }
}

/// The environment itself as the dynamics model.
#[derive(Debug, Clone, Copy)]
pub struct OracleDynamics;

impl PlanDynamics<History> for OracleDynamics {
    fn predict(&self, obs: &History, candidates: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f32>>> {
        let start = *obs.current();
        let res = obs.resolution;
        Ok(par::map_slice(candidates, |seq| {
            let mut s = start;
            let mut out = Vec::with_capacity(horizon * res * res * 3);
            for t in 0..horizon {
                s = pusher::step_state(&s, [seq[2 * t], seq[2 * t + 1]]).0;
                out.extend(pusher::render(&s, res));
            }
            out
        }))
    }
}

/// A trained action-conditioned model as the dynamics. The context is the
/// last `c` observed frames, padded with the first frame and zero actions
/// at the start of an episode. Every candidate uses the same latent noise.
pub struct ModelDynamics<'a> {
    pub model: &'a FitVid,
    pub params: &'a ParamStore<f32>,
    pub seed: u64,
    /// Candidates per forward batch.
    pub batch: usize,
}

impl PlanDynamics<History> for ModelDynamics<'_> {
    fn predict(&self, obs: &History, candidates: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.model.cfg;
        if obs.resolution != cfg.input_size || cfg.action_dim != 2 {
            return Err(Error::Plan(format!(
                "model expects {0}x{0} frames and {1}-d actions, episode renders {2}x{2} with 2-d actions",
                cfg.input_size, cfg.action_dim, obs.resolution
            )));
        }
        let c = cfg.context_frames;
        let n = obs.frames.len();
        let frame_len = obs.frames[0].len();
        let mut ctx = Vec::with_capacity(c * frame_len);
        let mut past = Vec::with_capacity(2 * (c - 1));
        for i in 0..c {
            let idx = (n + i).saturating_sub(c);
            ctx.extend_from_slice(&obs.frames[idx]);
            if i + 1 < c {
                let a = (n + i + 1).checked_sub(c + 1).map_or([0.0, 0.0], |j| obs.actions[j]);
                past.extend(a.iter().map(|&v| v as f32));
            }
        }
        let res = obs.resolution;
        let mut out = Vec::with_capacity(candidates.len());
        for chunk in candidates.chunks(self.batch.max(1)) {
            let b = chunk.len();
            let context = Tensor::from_vec(&[b, c, res, res, 3], ctx.repeat(b));
            let mut acts = Vec::with_capacity(b * (c - 1 + horizon) * 2);
            for seq in chunk {
                acts.extend_from_slice(&past);
                acts.extend(seq.iter().take(2 * horizon).map(|&v| v as f32));
            }
            let actions = Tensor::from_vec(&[b, c - 1 + horizon, 2], acts);
            let req = RolloutRequest::new(context, Some(actions), horizon, 1, self.seed);
            let pred = predict_sequence(self.model, self.params, &req, None)?;
            out.extend((0..b).map(|i| pred.index_axis0(i).into_data()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    /// First step at which the object was within the success radius.
    pub success_step: Option<usize>,
    pub states: Vec<PusherState>,
    pub actions: Vec<[f64; 2]>,
}

fn latch(states: &[PusherState]) -> Option<usize> {
    states.iter().position(|s| s.is_success())
}

/// Plans `replans_per_episode` times, each time executing the best
/// `horizon` actions open loop. Success latches at the first qualifying
/// step, including step 0.
pub fn run_episode<D: PlanDynamics<History> + ?Sized, R: Rng>(
    start: &PusherState,
    goal: &[f32],
    cfg: &CemConfig,
    dynamics: &D,
    resolution: usize,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    if cfg.action_dim() != 2 {
        return Err(Error::Config("the pushing task has 2-d actions".into()));
    }
    let mut hist = History::new(*start, resolution);
    for _ in 0..cfg.replans_per_episode {
        let plan = cem_plan(dynamics, &hist, goal, cfg, rng)?;
        for t in 0..cfg.horizon {
            let a = [plan.best_actions[2 * t], plan.best_actions[2 * t + 1]];
            let (next, frame) = pusher::pusher_env_step(hist.current(), a, resolution);
            hist.states.push(next);
            hist.frames.push(frame);
            hist.actions.push(a);
        }
    }
    let success_step = latch(&hist.states);
    Ok(EpisodeOutcome {
        success: success_step.is_some(),
        success_step,
        states: hist.states,
        actions: hist.actions,
    })
}

/// Uniformly random actions for a whole episode.
pub fn run_random_episode<R: Rng>(start: &PusherState, cfg: &CemConfig, rng: &mut R) -> EpisodeOutcome {
    let mut states = vec![*start];
    let mut actions = Vec::with_capacity(cfg.episode_length);
    for _ in 0..cfg.episode_length {
        let a = [rng.gen_range(-ACTION_BOUND..=ACTION_BOUND), rng.gen_range(-ACTION_BOUND..=ACTION_BOUND)];
        states.push(pusher::step_state(states.last().unwrap(), a).0);
        actions.push(a);
    }
    let success_step = latch(&states);
    EpisodeOutcome {
        success: success_step.is_some(),
        success_step,
        states,
        actions,
    }
}

/// Pushing tasks: the agent waits just behind the object, and the goal lies
/// 0.25 to 0.35 away along the line through both.
pub fn scripted_tasks(n: usize, seed: u64) -> Vec<PusherState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let object = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = [angle.cos(), angle.sin()];
        let dist = rng.gen_range(0.25..0.35);
        let back = pusher::AGENT_HALF * std::f64::consts::SQRT_2 + pusher::OBJECT_RADIUS + 0.02;
        let agent = [object[0] - dir[0] * back, object[1] - dir[1] * back];
        let goal = [object[0] + dir[0] * dist, object[1] + dir[1] * dist];
        let s = PusherState::new(agent, object, goal);
        if s.agent == agent && s.object == object && s.goal[0] > 0.1 && s.goal[0] < 0.9 && s.goal[1] > 0.1 && s.goal[1] < 0.9
        {
            out.push(s);
        }
    }
    out
}

/// A hand-written push for a scripted task: drive straight at the goal for
/// as long as it takes, then hold still.
pub fn demonstration(task: &PusherState, horizon: usize) -> Vec<f64> {
    let d = [task.goal[0] - task.object[0], task.goal[1] - task.object[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
    let mut travel = n + (pusher::AGENT_HALF * std::f64::consts::SQRT_2 + pusher::OBJECT_RADIUS + 0.02)
        - (pusher::AGENT_HALF + pusher::OBJECT_RADIUS);
    let mut out = Vec::with_capacity(2 * horizon);
    for _ in 0..horizon {
        let s = travel.clamp(0.0, ACTION_BOUND);
        travel -= s;
        out.extend([d[0] / n * s, d[1] / n * s]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surrogate(_: &(), c: &[Vec<f64>], _: usize) -> Result<Vec<Vec<f32>>> {
        Ok(c.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect())
    }

    #[test]
    fn zero_iterations_samples_once() {
        let cfg = CemConfig {
            iterations: 0,
            ..CemConfig::default()
        };
        let goal = vec![0.05f32; 2];
        let r = cem_plan(&surrogate, &(), &goal, &CemConfig { horizon: 10, ..cfg }, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(r.elite_cost_trace.len(), 1);
    }

    #[test]
    fn rejects_inconsistent_episode() {
        let cfg = CemConfig {
            horizon: 7,
            ..CemConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dynamics_errors_carry_context() {
        let bad = |_: &(), _: &[Vec<f64>], _: usize| -> Result<Vec<Vec<f32>>> { Err(Error::Numeric("boom".into())) };
        let err = cem_plan(&bad, &(), &[0.0; 2], &CemConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("round 0") && err.to_string().contains("boom"));
    }
}
