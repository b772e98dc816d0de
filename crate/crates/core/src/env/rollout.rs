//! Policy execution, episode evaluation and the evaluation CSV.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::expert::expert_len;
use super::{reset, tasks, EnvConfig, Scene};
use crate::error::{Error, Result};
use crate::group::GroupElement;
use crate::lattice;
use crate::math::{Vec3, IDENTITY3};
use crate::scene::{ActionChunk, ControlMode, GripperState, Observation, TaskId};

/// Closed-loop control executes this many steps of each chunk before replanning.
pub const REPLAN_EVERY: usize = 9;

pub const EVAL_CSV_HEADER: &str = "episode,seed,transform_m,transform_tx,transform_ty,transform_tz,success,steps";

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub keypose: Option<Vec3>,
    pub chunk: ActionChunk,
}

pub trait Policy {
    fn plan(&mut self, scene: &Scene, obs: &Observation) -> Result<Plan>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub states: Vec<GripperState>,
    pub keyposes: Vec<Vec3>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub success: bool,
    pub steps: u64,
    pub trace: Trace,
}

/// Tick budget for closed-loop episodes: the expert's length rounded up to
/// whole replanning cycles.
pub fn closed_loop_cap(scene: &Scene, m: usize) -> usize {
    expert_len(scene, m).div_ceil(REPLAN_EVERY) * REPLAN_EVERY
}

/// Runs one episode. Planning or stepping errors end the episode as a
/// failure recorded in the trace.
pub fn rollout(policy: &mut dyn Policy, scene: &mut Scene, obs: Observation, mode: ControlMode, m: usize) -> RolloutResult {
    let mut trace = Trace::default();
    let mut obs = obs;
    let outcome = (|| -> Result<()> {
        match mode {
            ControlMode::Open => {
                for _ in 0..tasks::segments(scene.task) {
                    let plan = policy.plan(scene, &obs)?;
                    trace.keyposes.extend(plan.keypose);
                    for s in &plan.chunk.steps {
                        obs = scene.step(s)?;
                        trace.states.push(scene.gripper);
                    }
                }
            }
            ControlMode::Closed => {
                let cap = closed_loop_cap(scene, m);
                let mut done = 0;
                while done < cap {
                    let plan = policy.plan(scene, &obs)?;
                    trace.keyposes.extend(plan.keypose);
                    let n = plan.chunk.len().min(REPLAN_EVERY).min(cap - done);
                    for s in &plan.chunk.steps[..n] {
                        obs = scene.step(s)?;
                        trace.states.push(scene.gripper);
                    }
                    done += n;
                }
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        trace.error = Some(e.to_string());
    }
    RolloutResult { success: trace.error.is_none() && scene.success(), steps: scene.tick, trace }
}

/// Scene transforms for evaluation: quarter turns (optional) and whole-voxel
/// translations with Chebyshev xy norm in `[min_shift, max_shift]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformDist {
    pub rotations: bool,
    pub min_shift: u32,
    pub max_shift: u32,
    pub max_shift_z: u32,
}

impl Default for TransformDist {
    fn default() -> Self {
        Self { rotations: true, min_shift: 0, max_shift: 1, max_shift_z: 0 }
    }
}

impl TransformDist {
    pub fn identity() -> Self {
        Self { rotations: false, min_shift: 0, max_shift: 0, max_shift_z: 0 }
    }

    pub fn validate(&self, cfg: &EnvConfig) -> Result<()> {
        let limit = (cfg.dims[0] / 4) as u32;
        if self.min_shift > self.max_shift || self.max_shift > limit {
            return Err(Error::Config(format!(
                "translation range [{}, {}] must be ordered and within {limit} voxels",
                self.min_shift, self.max_shift
            )));
        }
        if self.max_shift_z > 0 && self.max_shift_z as usize + cfg.dims[0] / 2 + 1 > cfg.dims[2] {
            return Err(Error::Config(format!("max_shift_z {} leaves the workspace", self.max_shift_z)));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, resolution: f64) -> GroupElement {
        let m = if self.rotations { rng.gen_range(0..4) } else { 0 };
        let max = self.max_shift as i64;
        let (tx, ty) = loop {
            let tx = rng.gen_range(-max..=max);
            let ty = rng.gen_range(-max..=max);
            if tx.abs().max(ty.abs()) >= self.min_shift as i64 {
                break (tx, ty);
            }
        };
        let tz = rng.gen_range(0..=self.max_shift_z as i64);
        let t = [tx as f64 * resolution, ty as f64 * resolution, tz as f64 * resolution];
        GroupElement { t, m, u: 4 }
    }
}

/// `(seed, transform)` for episodes `0..n`; the transform of episode `i`
/// depends only on its seed.
pub fn sample_episodes(n: usize, seed0: u64, dist: &TransformDist, resolution: f64) -> Vec<(u64, GroupElement)> {
    (0..n as u64)
        .map(|i| {
            let seed = seed0 + i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7A45);
            (seed, dist.sample(&mut rng, resolution))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub episode: usize,
    pub seed: u64,
    pub transform: GroupElement,
    pub success: bool,
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.rows.iter().filter(|r| r.success).count()
    }

    /// Zero for an empty report.
    pub fn success_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.successes() as f64 / self.rows.len() as f64
        }
    }

    /// 95% Wilson score interval.
    pub fn interval95(&self) -> (f64, f64) {
        let n = self.rows.len() as f64;
        if n == 0.0 {
            return (0.0, 1.0);
        }
        let z = 1.959963984540054;
        let p = self.success_rate();
        let denom = 1.0 + z * z / n;
        let center = (p + z * z / (2.0 * n)) / denom;
        let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
        ((center - half).max(0.0), (center + half).min(1.0))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let t = r.transform.t;
            writeln!(s, "{},{},{},{},{},{},{},{}", r.episode, r.seed, r.transform.m, t[0], t[1], t[2], r.success as u8, r.steps)
                .unwrap();
        }
        s
    }
}

/// Runs one episode per `(seed, transform)`; `make_policy` builds a fresh
/// policy for each episode seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<'p>(
    make_policy: &mut dyn FnMut(u64) -> Result<Box<dyn Policy + 'p>>,
    task: TaskId,
    episodes: &[(u64, GroupElement)],
    cfg: &EnvConfig,
    t_hist: usize,
    t_act: usize,
    mode: ControlMode,
    m: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (episode, &(seed, g)) in episodes.iter().enumerate() {
        let (success, steps) = match reset(task, seed, &g, cfg, t_hist, t_act) {
            Ok((mut scene, obs)) => {
                let mut policy = make_policy(seed)?;
                let r = rollout(policy.as_mut(), &mut scene, obs, mode, m);
                if let Some(e) = &r.trace.error {
                    log::debug!("episode {episode} (seed {seed}) failed: {e}");
                }
                (r.success, r.steps)
            }
            Err(e) => {
                log::warn!("episode {episode} (seed {seed}) could not be reset: {e}");
                (false, 0)
            }
        };
        report.rows.push(EvalRow { episode, seed, transform: g, success, steps });
    }
    Ok(report)
}

/// Uniformly random lattice commands inside the workspace.
pub struct RandomPolicy {
    pub rng: ChaCha8Rng,
    pub m: usize,
}

impl Policy for RandomPolicy {
    fn plan(&mut self, scene: &Scene, _obs: &Observation) -> Result<Plan> {
        let ws = scene.cfg.workspace(1)?;
        let steps = (0..self.m)
            .map(|_| {
                let mut p = [0.0; 3];
                for k in 0..3 {
                    let span = ws.resolution * ws.dims[k] as f64;
                    p[k] = lattice::snap(ws.origin[k] + self.rng.gen_range(0.0..span));
                }
                GripperState { position: p, q: IDENTITY3, c: self.rng.gen_range(0.0..1.0) }
            })
            .collect();
        Ok(Plan { keypose: None, chunk: ActionChunk::new(steps)? })
    }
}
