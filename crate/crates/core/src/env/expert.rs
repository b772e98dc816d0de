//! Scripted waypoint expert and demonstration recording.

use super::rollout::{Plan, Policy};
use super::{reset, EnvConfig, Scene};
use crate::error::{Error, Result};
use crate::group::GroupElement;
use crate::lattice;
use crate::scene::{interpolate_segment, ActionChunk, ControlMode, DemoMeta, Demonstration, Frame, GripperState, Observation, TaskId};

/// Command sequence from the current gripper state through every waypoint:
/// `m` lattice-interpolated ticks per move, an aperture change at the
/// waypoint if needed, then stationary holds.
pub fn expert_plan(scene: &Scene, m: usize) -> Vec<GripperState> {
    let mut cur = scene.gripper;
    let mut out = Vec::new();
    for wp in &scene.waypoints {
        let target = wp.state;
        for i in 1..=m {
            let position = lattice::lerp3(cur.position, target.position, i as i64, m as i64);
            out.push(GripperState { position, q: target.q, c: cur.c });
        }
        let mut still = 0;
        if target.c != cur.c {
            out.push(target);
            still = 1;
        }
        while still < wp.hold {
            out.push(target);
            still += 1;
        }
        cur = target;
    }
    out
}

/// Runs the expert from `reset(task, seed, g)` and records every tick.
pub fn expert_demo(
    task: TaskId,
    seed: u64,
    g: &GroupElement,
    cfg: &EnvConfig,
    t_hist: usize,
    t_act: usize,
    m: usize,
) -> Result<Demonstration> {
    let (mut scene, obs) = reset(task, seed, g, cfg, t_hist, t_act)?;
    let mut frames = vec![Frame { tick: 0, obs, state: scene.gripper }];
    for cmd in expert_plan(&scene, m) {
        let obs = scene.step(&cmd)?;
        frames.push(Frame { tick: scene.tick, obs, state: scene.gripper });
    }
    if !scene.success() {
        return Err(Error::Unsolvable(format!("expert fails {} seed {seed} under {g}", task.name())));
    }
    Demonstration::new(frames, DemoMeta { task, seed, transform: *g })
}

/// The scripted expert as a policy: one segment per waypoint in open loop,
/// the precomputed command stream in closed loop.
pub struct ExpertPolicy {
    pub mode: ControlMode,
    pub m: usize,
    segment: usize,
    plan: Option<Vec<GripperState>>,
}

impl ExpertPolicy {
    pub fn new(mode: ControlMode, m: usize) -> Self {
        Self { mode, m, segment: 0, plan: None }
    }
}

impl Policy for ExpertPolicy {
    fn plan(&mut self, scene: &Scene, _obs: &Observation) -> Result<Plan> {
        match self.mode {
            ControlMode::Open => {
                let wp = scene
                    .waypoints
                    .get(self.segment)
                    .ok_or_else(|| Error::InvalidState(format!("no waypoint for segment {}", self.segment)))?;
                self.segment += 1;
                Ok(Plan { keypose: Some(wp.state.position), chunk: interpolate_segment(&scene.gripper, &wp.state, self.m)? })
            }
            ControlMode::Closed => {
                let m = self.m;
                let plan = self.plan.get_or_insert_with(|| expert_plan(scene, m));
                let last = *plan.last().unwrap_or(&scene.gripper);
                let s = scene.tick as usize;
                let steps = (0..self.m).map(|j| plan.get(s + j).copied().unwrap_or(last)).collect();
                Ok(Plan { keypose: None, chunk: ActionChunk::new(steps)? })
            }
        }
    }
}

/// Number of ticks in the expert's command stream for this scene.
pub fn expert_len(scene: &Scene, m: usize) -> usize {
    expert_plan(scene, m).len()
}

/// Expert demos for each `(seed, transform)`. Seeds the expert cannot solve
/// are returned separately rather than failing the batch.
#[allow(clippy::too_many_arguments)]
pub fn generate_demos(
    task: TaskId,
    episodes: &[(u64, GroupElement)],
    cfg: &EnvConfig,
    t_hist: usize,
    t_act: usize,
    m: usize,
) -> Result<(Vec<Demonstration>, Vec<u64>)> {
    let mut demos = Vec::new();
    let mut failed = Vec::new();
    for &(seed, g) in episodes {
        match expert_demo(task, seed, &g, cfg, t_hist, t_act, m) {
            Ok(d) => demos.push(d),
            Err(Error::Unsolvable(msg) | Error::InexactTransform(msg) | Error::InvalidArgument(msg)) => {
                log::debug!("seed {seed}: {msg}");
                failed.push(seed);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((demos, failed))
}
