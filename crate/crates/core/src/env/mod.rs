//! Kinematic tabletop environments: scene construction, gripper stepping
//! with grasp/push rules, and point-cloud rendering.
//!
//! All object centers and gripper positions live on the command lattice and
//! all rendered points on the sensor lattice, so applying a quarter turn or
//! whole-voxel translation to a scene commutes exactly with rendering and
//! stepping.

pub mod expert;
pub mod rollout;
pub mod tasks;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::GroupElement;
use crate::lattice;
use crate::math::{self, Vec3};
use crate::scene::{GripperState, Observation, PointCloud, TaskId};
use crate::voxel::VoxelGridSpec;

pub use tasks::Waypoint;

/// Features per rendered point (RGB).
pub const POINT_FEATURES: usize = 3;
/// Aperture below which the gripper counts as closed.
pub const CLOSED_BELOW: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub resolution: f64,
    pub dims: [usize; 3],
    pub points_per_face: usize,
    pub cube_size: f64,
    pub grasp_radius: f64,
    /// Stationary ticks the expert holds at intermediate waypoints.
    pub dwell_ticks: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { resolution: 0.0625, dims: [8, 8, 8], points_per_face: 40, cube_size: 0.025, grasp_radius: 0.01, dwell_ticks: 4 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.workspace(1)?;
        let n = self.dims[0];
        if n < 8 || n % 4 != 0 || self.dims[2] < 4 {
            return Err(Error::Config(format!("workspace dims {:?} too small (need xy >= 8, multiple of 4)", self.dims)));
        }
        if !lattice::on_lattice(self.resolution / 2.0) {
            return Err(Error::Config(format!("resolution {} must be a multiple of twice the lattice quantum", self.resolution)));
        }
        if self.points_per_face == 0 || !(self.cube_size > 0.0) || !(self.grasp_radius > 0.0) {
            return Err(Error::Config("points_per_face, cube_size and grasp_radius must be > 0".into()));
        }
        if self.dwell_ticks < 2 {
            return Err(Error::Config("dwell_ticks must be >= 2".into()));
        }
        Ok(())
    }

    /// Grid covering the workspace, centered on the z axis with its floor at 0.
    pub fn workspace(&self, max_points_per_voxel: usize) -> Result<VoxelGridSpec> {
        VoxelGridSpec::centered(self.resolution, self.dims, 0.0, max_points_per_voxel)
    }

    /// Lift height in whole voxels, at least 6 cm.
    pub fn lift_voxels(&self) -> usize {
        (0.06 / self.resolution).ceil().max(1.0) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Cube,
    /// Flat marker on the table.
    Pad,
    /// Small cube marking a reach goal.
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub kind: ObjectKind,
    pub center: Vec3,
    /// Yaw in quarter turns.
    pub yaw: u32,
    pub color: [f64; 3],
    /// Height of the center when resting on the table.
    pub rest_z: f64,
    /// Surface samples in the object frame at yaw 0, on the sensor lattice.
    pub local: Arc<Vec<Vec3>>,
}

impl Object {
    pub fn render(&self, cloud: &mut PointCloud) {
        for p in self.local.iter() {
            let r = quarter_rotate(*p, self.yaw);
            cloud.push(math::add(self.center, r), &self.color).expect("feature width");
        }
    }
}

/// Exact rotation of `p` by `k` quarter turns about z.
pub fn quarter_rotate(p: Vec3, k: u32) -> Vec3 {
    match k % 4 {
        0 => p,
        1 => [-p[1], p[0], p[2]],
        2 => [-p[0], -p[1], p[2]],
        _ => [p[1], -p[0], p[2]],
    }
}

/// Uniform surface samples on the faces of an axis-aligned box.
fn sample_box(rng: &mut ChaCha8Rng, half: Vec3, per_face: usize, top_only: bool) -> Vec<Vec3> {
    let mut out = Vec::new();
    let faces: &[(usize, f64)] = if top_only { &[(2, 1.0)] } else { &[(0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0), (2, -1.0), (2, 1.0)] };
    for &(axis, sign) in faces {
        for _ in 0..per_face {
            let mut p = [0.0; 3];
            for (k, v) in p.iter_mut().enumerate() {
                *v = if k == axis { sign * half[k] } else { rng.gen_range(-half[k]..half[k]) };
            }
            out.push(lattice::snap_sensor3(p));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub task: TaskId,
    pub seed: u64,
    pub transform: GroupElement,
    pub cfg: EnvConfig,
    pub objects: Vec<Object>,
    pub gripper: GripperState,
    /// Attached object index and its offset from the gripper.
    pub attached: Option<(usize, Vec3)>,
    pub tick: u64,
    /// Expert waypoints, transformed with the scene.
    pub waypoints: Vec<Waypoint>,
    /// Height of the manipulated cube at reset.
    pub start_z: f64,
    states: VecDeque<GripperState>,
    commands: VecDeque<GripperState>,
    t_hist: usize,
    t_act: usize,
}

pub const CUBE_COLOR: [f64; 3] = [0.9, 0.15, 0.1];
pub const PAD_COLOR: [f64; 3] = [0.1, 0.8, 0.2];
pub const TARGET_COLOR: [f64; 3] = [0.1, 0.3, 0.95];

impl Scene {
    pub fn make_object(&self, kind: ObjectKind, center: Vec3, rng: &mut ChaCha8Rng) -> Object {
        make_object(&self.cfg, kind, center, rng)
    }

    fn bounds_ok(&self, p: Vec3) -> bool {
        let ws = self.cfg.workspace(1).expect("validated");
        ws.contains(p)
    }

    /// Observation of the current scene with the configured history lengths.
    pub fn observe(&self) -> Observation {
        let mut cloud = PointCloud::new(POINT_FEATURES);
        for o in &self.objects {
            o.render(&mut cloud);
        }
        render_gripper(&self.gripper, &mut cloud);
        Observation {
            cloud,
            state_history: self.states.iter().copied().collect(),
            action_history: self.commands.iter().copied().collect(),
        }
    }

    pub fn history_lengths(&self) -> (usize, usize) {
        (self.t_hist, self.t_act)
    }

    pub fn cube(&self) -> Option<&Object> {
        self.objects.iter().find(|o| o.kind == ObjectKind::Cube)
    }

    pub fn success(&self) -> bool {
        tasks::success(self)
    }

    /// Executes one gripper command. Positions outside the workspace are
    /// clamped to its boundary.
    pub fn step(&mut self, cmd: &GripperState) -> Result<Observation> {
        cmd.validate()?;
        let ws = self.cfg.workspace(1)?;
        let mut cmd = *cmd;
        for k in 0..3 {
            let lo = ws.origin[k];
            let hi = ws.origin[k] + ws.resolution * ws.dims[k] as f64 - lattice::QUANTUM;
            let v = cmd.position[k].clamp(lo, hi);
            if v != cmd.position[k] {
                log::debug!("command {:?} outside workspace, clamped", cmd.position);
                cmd.position[k] = lattice::snap(v);
            }
        }
        cmd.position = lattice::snap3(cmd.position);
        let prev = self.gripper;
        self.gripper = cmd;
        let was_closed = prev.c < CLOSED_BELOW;
        let closed = cmd.c < CLOSED_BELOW;

        if let Some((i, off)) = self.attached {
            let o = &mut self.objects[i];
            o.center = math::add(cmd.position, off);
            if !closed {
                o.center[2] = o.rest_z;
                self.attached = None;
            }
        } else if closed && !was_closed {
            let r = self.cfg.grasp_radius;
            let hit = self
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.kind == ObjectKind::Cube)
                .map(|(i, o)| (i, math::norm(math::sub(o.center, cmd.position))))
                .filter(|(_, d)| *d <= r)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = hit {
                self.attached = Some((i, math::sub(self.objects[i].center, cmd.position)));
            }
        }
        if closed && self.attached.is_none() {
            self.push_objects(prev.position, cmd.position);
        }

        push_bounded(&mut self.states, cmd, self.t_hist);
        push_bounded(&mut self.commands, cmd, self.t_act);
        self.tick += 1;
        Ok(self.observe())
    }

    /// A closed gripper moving along a dominant axis shoves any cube in its
    /// path so the cube center stays half a voxel ahead.
    fn push_objects(&mut self, from: Vec3, to: Vec3) {
        let d = math::sub(to, from);
        let (axis, other) = if d[0].abs() > d[1].abs() {
            (0, 1)
        } else if d[1].abs() > d[0].abs() {
            (1, 0)
        } else {
            return;
        };
        let s = d[axis].signum();
        let reach = self.cfg.resolution / 2.0;
        let half = self.cfg.cube_size / 2.0;
        for o in self.objects.iter_mut().filter(|o| o.kind == ObjectKind::Cube) {
            let rel = math::sub(o.center, to);
            let ahead = s * rel[axis];
            if (rel[2]).abs() < half + 0.01 && rel[other].abs() < half + 0.005 && ahead > -half && ahead < reach {
                o.center[axis] = to[axis] + s * reach;
            }
        }
    }
}

fn push_bounded(q: &mut VecDeque<GripperState>, s: GripperState, n: usize) {
    q.push_back(s);
    while q.len() > n {
        q.pop_front();
    }
}

pub fn make_object(cfg: &EnvConfig, kind: ObjectKind, center: Vec3, rng: &mut ChaCha8Rng) -> Object {
    let h = cfg.cube_size / 2.0;
    let (half, top_only, color, per_face) = match kind {
        ObjectKind::Cube => ([h; 3], false, CUBE_COLOR, cfg.points_per_face),
        ObjectKind::Pad => ([0.8 * cfg.resolution / 2.0, 0.8 * cfg.resolution / 2.0, 0.0], true, PAD_COLOR, 2 * cfg.points_per_face),
        ObjectKind::Target => ([h / 2.0; 3], false, TARGET_COLOR, cfg.points_per_face / 4 + 1),
    };
    let mut local = sample_box(rng, half, per_face, top_only);
    if kind == ObjectKind::Pad {
        // Flat on the table under a cube resting at the pad center.
        let dz = lattice::snap(h);
        for p in &mut local {
            p[2] -= dz;
        }
    }
    Object { kind, center, yaw: 0, color, rest_z: center[2], local: Arc::new(local) }
}

/// Two fingers whose spacing follows the aperture, plus a palm column.
pub fn render_gripper(s: &GripperState, cloud: &mut PointCloud) {
    let half_q = lattice::QUANTUM / 2.0;
    let spread = lattice::snap(0.004 + 0.012 * s.c.clamp(0.0, 1.0)) + half_q;
    let color = [0.5, 0.5, s.c.clamp(0.0, 1.0)];
    let mut push = |off: Vec3| {
        let w = lattice::snap_sensor3(math::mat_vec(&s.q, off));
        cloud.push(math::add(s.position, w), &color).expect("feature width");
    };
    for j in 0..4 {
        let z = lattice::snap(0.006 * j as f64) + half_q;
        push([spread, half_q, z]);
        push([-spread, half_q, z]);
    }
    for j in 1..3 {
        push([half_q, half_q, lattice::snap(0.03 + 0.008 * j as f64) + half_q]);
    }
}

/// Deterministic scene for `(task, seed)`, then transformed by `g`.
pub fn reset(
    task: TaskId,
    seed: u64,
    g: &GroupElement,
    cfg: &EnvConfig,
    t_hist: usize,
    t_act: usize,
) -> Result<(Scene, Observation)> {
    cfg.validate()?;
    if t_hist == 0 {
        return Err(Error::Config("t_hist must be >= 1".into()));
    }
    let k = g.quarter_turns().ok_or_else(|| Error::InexactTransform(format!("rotation r^{} of C{} is not a quarter turn", g.m, g.u)))?;
    let mut layout = tasks::canonical_layout(task, seed, cfg)?;
    for o in &mut layout.objects {
        o.center = g.act_position(o.center);
        o.rest_z += g.t[2];
        o.yaw = (o.yaw + k) % 4;
    }
    let gripper = g.act_gripper(&layout.gripper)?;
    let waypoints = layout
        .waypoints
        .iter()
        .map(|w| Ok(Waypoint { state: g.act_gripper(&w.state)?, hold: w.hold }))
        .collect::<Result<Vec<_>>>()?;
    let mut scene = Scene {
        task,
        seed,
        transform: *g,
        cfg: cfg.clone(),
        objects: layout.objects,
        gripper,
        attached: None,
        tick: 0,
        waypoints,
        start_z: 0.0,
        states: std::iter::repeat(gripper).take(t_hist).collect(),
        commands: std::iter::repeat(gripper).take(t_act).collect(),
        t_hist,
        t_act,
    };
    scene.start_z = scene.cube().map(|c| c.center[2]).unwrap_or(0.0);
    let inside = scene.objects.iter().all(|o| scene.bounds_ok(o.center))
        && scene.bounds_ok(scene.gripper.position)
        && scene.waypoints.iter().all(|w| scene.bounds_ok(w.state.position));
    if !inside {
        return Err(Error::InvalidArgument(format!("transform {g} pushes the {} scene for seed {seed} out of the workspace", task.name())));
    }
    let obs = scene.observe();
    Ok((scene, obs))
}

pub(crate) fn layout_rng(task: TaskId, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (task.code() as u64 + 1))
}
