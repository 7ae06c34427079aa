//! A 2-D pushing environment: a square agent moved by position deltas and a
//! disc-shaped object it can shove. Frames are anti-aliased RGB renders.

use serde::{Deserialize, Serialize};

/// Per-axis action bound in arena units.
pub const ACTION_BOUND: f64 = 0.1;
pub const OBJECT_RADIUS: f64 = 0.07;
pub const AGENT_HALF: f64 = 0.05;
/// Object-to-goal distance that counts as success.
pub const SUCCESS_RADIUS: f64 = 0.08;

const BACKGROUND: [f64; 3] = [0.92, 0.92, 0.88];
const AGENT_COLOR: [f64; 3] = [0.15, 0.35, 0.85];
const OBJECT_COLOR: [f64; 3] = [0.85, 0.25, 0.15];
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PusherState {
    pub agent: [f64; 2],
    pub object: [f64; 2],
    pub goal: [f64; 2],
    pub object_radius: f64,
    pub agent_half: f64,
}

impl PusherState {
    pub fn new(agent: [f64; 2], object: [f64; 2], goal: [f64; 2]) -> Self {
        let mut s = Self {
            agent,
            object,
            goal,
            object_radius: OBJECT_RADIUS,
            agent_half: AGENT_HALF,
        };
        s.agent = s.clamp_agent(agent);
        s.object = s.clamp_object(object);
        s
    }

    fn clamp_agent(&self, p: [f64; 2]) -> [f64; 2] {
        let h = self.agent_half;
        [p[0].clamp(h, 1.0 - h), p[1].clamp(h, 1.0 - h)]
    }

    fn clamp_object(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.object_radius;
        [p[0].clamp(r, 1.0 - r), p[1].clamp(r, 1.0 - r)]
    }

    /// Whether a square agent at `agent` and the disc at `object` overlap.
    pub fn overlaps(&self, agent: [f64; 2], object: [f64; 2]) -> bool {
        let h = self.agent_half;
        let dx = (object[0] - agent[0]).abs() - h;
        let dy = (object[1] - agent[1]).abs() - h;
        let (ox, oy) = (dx.max(0.0), dy.max(0.0));
        ox * ox + oy * oy < self.object_radius * self.object_radius
    }

    pub fn object_to_goal(&self) -> f64 {
        let d = [self.object[0] - self.goal[0], self.object[1] - self.goal[1]];
        (d[0] * d[0] + d[1] * d[1]).sqrt()
    }

    pub fn is_success(&self) -> bool {
        self.object_to_goal() <= SUCCESS_RADIUS
    }
}

pub fn clamp_action(a: [f64; 2]) -> [f64; 2] {
    [a[0].clamp(-ACTION_BOUND, ACTION_BOUND), a[1].clamp(-ACTION_BOUND, ACTION_BOUND)]
}

/// Nearest `f32` to a clamped action component that still lies inside the
/// bound.
pub fn action_to_f32(v: f64) -> f32 {
    let x = v.clamp(-ACTION_BOUND, ACTION_BOUND) as f32;
    if (x as f64).abs() > ACTION_BOUND {
        f32::from_bits(x.to_bits() - 1)
    } else {
        x
    }
}

/// Advances the state by one clamped action. The agent moves by the delta;
/// an overlapped object slides along the action direction to the nearest
/// non-overlapping position. If the arena wall stops the object short of
/// that, the agent stays where it was. Returns the new state and whether
/// the agent touched the object.
pub fn step_state(state: &PusherState, action: [f64; 2]) -> (PusherState, bool) {
    let a = clamp_action(action);
    let mut next = *state;
    next.agent = state.clamp_agent([state.agent[0] + a[0], state.agent[1] + a[1]]);
    if !state.overlaps(next.agent, state.object) {
        return (next, false);
    }
    let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
    if norm == 0.0 {
        next.agent = state.agent;
        return (next, true);
    }
    let d = [a[0] / norm, a[1] / norm];
    let along = |s: f64| [state.object[0] + s * d[0], state.object[1] + s * d[1]];
    // The set of overlapping offsets is an interval containing 0; bisect
    // for its upper end.
    let (mut lo, mut hi) = (0.0, norm + 2.0 * (state.agent_half * std::f64::consts::SQRT_2 + state.object_radius));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if state.overlaps(next.agent, along(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let pushed = state.clamp_object(along(hi));
    if state.overlaps(next.agent, pushed) {
        next.agent = state.agent;
    } else {
        next.object = pushed;
    }
    (next, true)
}

fn coverage(res: usize, px: usize, py: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let step = 1.0 / (res * SUPERSAMPLE) as f64;
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = (px * SUPERSAMPLE + sx) as f64 * step + 0.5 * step;
            let y = (py * SUPERSAMPLE + sy) as f64 * step + 0.5 * step;
            if inside(x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn pixel_range(lo: f64, hi: f64, res: usize) -> std::ops::Range<usize> {
    let a = (lo * res as f64).floor().max(0.0) as usize;
    let b = ((hi * res as f64).ceil().max(0.0) as usize).min(res);
    a.min(res)..b
}

/// Quantises to 8-bit levels, as stored on disk.
pub fn quantize(v: f64) -> f32 {
    level_to_unit((v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// The `[0, 1]` value of an 8-bit level.
pub fn level_to_unit(level: u8) -> f32 {
    level as f32 / 255.0
}

/// The 8-bit level nearest to a `[0, 1]` value.
pub fn unit_to_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders `[res, res, 3]` with x to the right and y downwards.
pub fn render(state: &PusherState, res: usize) -> Vec<f32> {
    let mut img: Vec<f64> = BACKGROUND.iter().copied().cycle().take(res * res * 3).collect();
    let paint = |img: &mut Vec<f64>, xr: std::ops::Range<usize>, yr: std::ops::Range<usize>, color: [f64; 3], inside: &dyn Fn(f64, f64) -> bool| {
        for py in yr {
            for px in xr.clone() {
                let cov = coverage(res, px, py, inside);
                if cov > 0.0 {
                    let base = (py * res + px) * 3;
                    for k in 0..3 {
                        img[base + k] = img[base + k] * (1.0 - cov) + color[k] * cov;
                    }
                }
            }
        }
    };
    let [ox, oy] = state.object;
    let r = state.object_radius;
    paint(
        &mut img,
        pixel_range(ox - r, ox + r, res),
        pixel_range(oy - r, oy + r, res),
        OBJECT_COLOR,
        &|x, y| (x - ox) * (x - ox) + (y - oy) * (y - oy) < r * r,
    );
    let [ax, ay] = state.agent;
    let h = state.agent_half;
    paint(
        &mut img,
        pixel_range(ax - h, ax + h, res),
        pixel_range(ay - h, ay + h, res),
        AGENT_COLOR,
        &|x, y| (x - ax).abs() < h && (y - ay).abs() < h,
    );
    img.into_iter().map(quantize).collect()
}

/// One environment step followed by a render of the new state.
pub fn pusher_env_step(state: &PusherState, action: [f64; 2], res: usize) -> (PusherState, Vec<f32>) {
    let (next, _) = step_state(state, action);
    let frame = render(&next, res);
    (next, frame)
}

/// The target picture for a task: object at the goal, agent just behind it
/// along the push direction.
pub fn goal_image(state: &PusherState, res: usize) -> Vec<f32> {
    let d = [state.goal[0] - state.object[0], state.goal[1] - state.object[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let dir = if n > 0.0 { [d[0] / n, d[1] / n] } else { [1.0, 0.0] };
    let back = state.agent_half + state.object_radius + 0.01;
    let target = PusherState::new(
        [state.goal[0] - dir[0] * back, state.goal[1] - dir[1] * back],
        state.goal,
        state.goal,
    );
    render(&target, res)
}
