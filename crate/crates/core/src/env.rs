//! Planar pick-and-place ground truth: physics, renderer, success predicate,
//! scripted expert and the perturbed near-success expert.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID: usize = 16;
pub const PLANE_LEN: usize = GRID * GRID;
pub const FRAME_LEN: usize = 3 * PLANE_LEN;
pub const BLOB_SIGMA: f64 = 1.0;
pub const HOME: [f64; 2] = [0.5, 0.1];

const ARRIVE_TOL: f64 = 1e-9;
/// Gripper-plane mass above this multiple of an open blob's mass reads as closed.
const CLOSED_MASS_RATIO: f64 = 1.3;
/// Half-width of the window around the brightest pixel used for centroids.
const CENTROID_RADIUS: isize = 3;

/// Absolute planar end-effector target plus gripper command.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPose {
    pub x: f64,
    pub y: f64,
    /// `true` = close.
    pub grip: bool,
}

impl ActionPose {
    pub fn new(x: f64, y: f64, grip: bool) -> Self {
        Self {
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
            grip,
        }
    }

    pub fn target(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// `[x, y, grip]` with the gripper bit as 0/1.
    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, if self.grip { 1.0 } else { 0.0 }]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub object_start_region: Region,
    pub goal_center: [f64; 2],
    pub goal_radius: f64,
    pub grasp_radius: f64,
    pub max_step_displacement: f64,
    pub horizon: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl TaskSpec {
    /// The reference task: carry an object from the left-centre of the
    /// arena to the upper-right goal.
    pub fn reference() -> Self {
        Self {
            task_id: "reference".into(),
            object_start_region: Region {
                min: [0.2, 0.35],
                max: [0.45, 0.55],
            },
            goal_center: [0.75, 0.85],
            goal_radius: 0.12,
            grasp_radius: 0.06,
            max_step_displacement: 0.08,
            horizon: 40,
        }
    }

    /// Shifted-layout variants used for world-model pretraining.
    pub fn pretraining_variants() -> Vec<Self> {
        let base = Self::reference();
        let variant = |id: &str, min: [f64; 2], max: [f64; 2], goal: [f64; 2]| Self {
            task_id: id.into(),
            object_start_region: Region { min, max },
            goal_center: goal,
            ..base.clone()
        };
        vec![
            variant("mirror", [0.55, 0.35], [0.8, 0.55], [0.25, 0.85]),
            variant("far-shelf", [0.3, 0.62], [0.7, 0.78], [0.5, 0.3]),
            variant("low-right", [0.15, 0.15], [0.4, 0.35], [0.82, 0.5]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("task.{msg}")))
            }
        };
        check(!self.task_id.is_empty(), "task_id must be non-empty")?;
        check(self.grasp_radius > 0.0, "grasp_radius must be positive")?;
        check(
            self.grasp_radius < self.goal_radius,
            "grasp_radius must be smaller than goal_radius",
        )?;
        check(self.max_step_displacement > 0.0, "max_step_displacement must be positive")?;
        check(self.horizon >= 1, "horizon must be at least 1")?;
        let r = &self.object_start_region;
        let inside = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
        check(
            inside(r.min) && inside(r.max) && r.min[0] <= r.max[0] && r.min[1] <= r.max[1],
            "object_start_region must be an ordered box inside the unit square",
        )?;
        check(inside(self.goal_center), "goal_center must lie in the unit square")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper_pos: [f64; 2],
    pub grip_closed: bool,
    pub object_pos: [f64; 2],
    pub held: bool,
    pub goal_center: [f64; 2],
    pub step_index: usize,
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Stateless wrapper binding the physics to one task.
#[derive(Clone, Debug)]
pub struct Env {
    pub task: TaskSpec,
}

impl Env {
    pub fn new(task: TaskSpec) -> Self {
        Self { task }
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &self.task.object_start_region;
        let sample = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let ox = sample(&mut rng, r.min[0], r.max[0]);
        let oy = sample(&mut rng, r.min[1], r.max[1]);
        EnvState {
            gripper_pos: HOME,
            grip_closed: false,
            object_pos: [ox, oy],
            held: false,
            goal_center: self.task.goal_center,
            step_index: 0,
        }
    }

    pub fn is_success(&self, s: &EnvState) -> bool {
        !s.held && !s.grip_closed && dist(s.object_pos, s.goal_center) <= self.task.goal_radius
    }

    pub fn step(&self, s: &EnvState, action: &ActionPose) -> Result<(EnvState, u8)> {
        if s.step_index >= self.task.horizon {
            return Err(Error::EpisodeExhausted {
                step: s.step_index,
                horizon: self.task.horizon,
            });
        }
        let mut n = *s;
        let target = action.target();
        let d = dist(s.gripper_pos, target);
        let v = self.task.max_step_displacement;
        n.gripper_pos = if d <= v {
            target
        } else {
            let k = v / d;
            [
                (s.gripper_pos[0] + (target[0] - s.gripper_pos[0]) * k).clamp(0.0, 1.0),
                (s.gripper_pos[1] + (target[1] - s.gripper_pos[1]) * k).clamp(0.0, 1.0),
            ]
        };
        n.grip_closed = action.grip;
        if action.grip {
            if !n.held && dist(n.gripper_pos, n.object_pos) <= self.task.grasp_radius {
                n.held = true;
            }
        } else {
            n.held = false;
        }
        if n.held {
            n.object_pos = n.gripper_pos;
        }
        n.step_index += 1;
        let reward = u8::from(self.is_success(&n));
        Ok((n, reward))
    }
}

/// Three stacked 16x16 planes: gripper, object, goal region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub data: Vec<f64>,
}

impl Frame {
    pub fn from_data(data: Vec<f64>) -> Result<Self> {
        if data.len() != FRAME_LEN {
            return Err(Error::dim("frame", FRAME_LEN, data.len()));
        }
        Ok(Self { data })
    }

    pub fn blank() -> Self {
        Self {
            data: vec![0.0; FRAME_LEN],
        }
    }

    pub fn plane(&self, p: usize) -> &[f64] {
        &self.data[p * PLANE_LEN..(p + 1) * PLANE_LEN]
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == FRAME_LEN && self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Arena coordinate -> continuous pixel coordinate. Pixel centres sit at
/// integers; arena 0 and 1 map to 0.5 and 15.5.
pub fn to_pixel(u: f64) -> f64 {
    0.5 + (GRID as f64 - 1.0) * u
}

pub fn from_pixel(p: f64) -> f64 {
    (p - 0.5) / (GRID as f64 - 1.0)
}

fn blob(plane: &mut [f64], pos: [f64; 2], amplitude: f64) {
    let (px, py) = (to_pixel(pos[0]), to_pixel(pos[1]));
    let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    for i in 0..GRID {
        for j in 0..GRID {
            let d2 = (j as f64 - px).powi(2) + (i as f64 - py).powi(2);
            plane[i * GRID + j] = (amplitude * (-d2 * inv).exp()).min(1.0);
        }
    }
}

pub fn render(s: &EnvState, goal_radius: f64) -> Frame {
    let mut data = vec![0.0; FRAME_LEN];
    let (grip, rest) = data.split_at_mut(PLANE_LEN);
    let (object, goal) = rest.split_at_mut(PLANE_LEN);
    blob(grip, s.gripper_pos, if s.grip_closed { 2.0 } else { 1.0 });
    blob(object, s.object_pos, 1.0);
    for i in 0..GRID {
        for j in 0..GRID {
            let c = [from_pixel(j as f64), from_pixel(i as f64)];
            if dist(c, s.goal_center) <= goal_radius {
                goal[i * GRID + j] = 1.0;
            }
        }
    }
    Frame { data }
}

/// Intensity-weighted centroid in a window around the brightest pixel, in
/// arena units, plus the mass inside that window.
fn centroid(plane: &[f64]) -> Option<([f64; 2], f64)> {
    let total: f64 = plane.iter().map(|v| v.max(0.0)).sum();
    if total <= 1e-12 {
        return None;
    }
    let (arg, _) = plane
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
    let (ai, aj) = ((arg / GRID) as isize, (arg % GRID) as isize);
    let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
    for i in (ai - CENTROID_RADIUS).max(0)..=(ai + CENTROID_RADIUS).min(GRID as isize - 1) {
        for j in (aj - CENTROID_RADIUS).max(0)..=(aj + CENTROID_RADIUS).min(GRID as isize - 1) {
            let v = plane[i as usize * GRID + j as usize].max(0.0);
            sx += v * j as f64;
            sy += v * i as f64;
            m += v;
        }
    }
    if m <= 1e-12 {
        return None;
    }
    Some(([from_pixel(sx / m), from_pixel(sy / m)], m))
}

/// Estimated object position and whether the frame shows a completed task.
pub fn decode_outcome(frame: &Frame, task: &TaskSpec) -> Result<([f64; 2], bool)> {
    if frame.data.len() != FRAME_LEN {
        return Err(Error::dim("frame", FRAME_LEN, frame.data.len()));
    }
    let (object, _) = centroid(frame.plane(1))
        .ok_or_else(|| Error::Undecodable("object plane is empty".into()))?;
    let open = match centroid(frame.plane(0)) {
        Some((g, mass)) => {
            let mut reference = vec![0.0; PLANE_LEN];
            blob(&mut reference, g, 1.0);
            let open_mass = centroid(&reference).map_or(0.0, |(_, m)| m);
            mass <= CLOSED_MASS_RATIO * open_mass
        }
        None => true,
    };
    let success = open && dist(object, task.goal_center) <= task.goal_radius;
    Ok((object, success))
}

/// Scripted controller working from ground-truth poses. `aim_offset` shifts
/// where it tries to grasp.
pub fn expert_action(s: &EnvState, task: &TaskSpec, aim_offset: [f64; 2]) -> ActionPose {
    let goal = task.goal_center;
    // A closed gripper is taken to hold the object, whether or not the grasp
    // actually caught it.
    if s.grip_closed {
        let release = dist(s.gripper_pos, goal) <= ARRIVE_TOL;
        return ActionPose::new(goal[0], goal[1], !release);
    }
    if !s.grip_closed && dist(s.object_pos, goal) <= task.goal_radius {
        return ActionPose::new(s.gripper_pos[0], s.gripper_pos[1], false);
    }
    let aim = ActionPose::new(
        s.object_pos[0] + aim_offset[0],
        s.object_pos[1] + aim_offset[1],
        false,
    );
    let arrived = dist(s.gripper_pos, aim.target()) <= ARRIVE_TOL;
    ActionPose { grip: arrived, ..aim }
}

/// An expert whose grasp point is displaced by a seeded offset drawn
/// uniformly (by area) from the annulus `[1.2, 2.5] * grasp_radius`. It
/// carries on to the goal after the missed grasp, releases, and retries.
#[derive(Clone, Debug)]
pub struct NearSuccessExpert {
    pub task: TaskSpec,
    pub offset: [f64; 2],
}

pub const NEAR_MIN_FACTOR: f64 = 1.2;
pub const NEAR_MAX_FACTOR: f64 = 2.5;

impl NearSuccessExpert {
    pub fn new(task: &TaskSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r1, r2) = (
            NEAR_MIN_FACTOR * task.grasp_radius,
            NEAR_MAX_FACTOR * task.grasp_radius,
        );
        let r = rng.random_range(r1 * r1..=r2 * r2).sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            task: task.clone(),
            offset: [r * theta.cos(), r * theta.sin()],
        }
    }

    pub fn action(&self, s: &EnvState) -> ActionPose {
        expert_action(s, &self.task, self.offset)
    }
}

/// States, actions and rewards of one full-horizon episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub states: Vec<EnvState>,
    pub actions: Vec<ActionPose>,
    pub rewards: Vec<u8>,
}

impl Episode {
    pub fn succeeded(&self) -> bool {
        self.rewards.iter().any(|&r| r == 1)
    }
}

/// Runs `controller` from `start` until the horizon.
pub fn run_episode(
    env: &Env,
    start: EnvState,
    mut controller: impl FnMut(&EnvState) -> ActionPose,
) -> Result<Episode> {
    let mut states = vec![start];
    let mut actions = Vec::with_capacity(env.task.horizon);
    let mut rewards = Vec::with_capacity(env.task.horizon);
    let mut s = start;
    while s.step_index < env.task.horizon {
        let a = controller(&s);
        let (n, r) = env.step(&s, &a)?;
        actions.push(a);
        rewards.push(r);
        states.push(n);
        s = n;
    }
    Ok(Episode {
        states,
        actions,
        rewards,
    })
}
