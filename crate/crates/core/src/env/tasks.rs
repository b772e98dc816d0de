//! Canonical layouts, expert waypoints and success predicates per task.

use rand::Rng;

use super::{layout_rng, make_object, EnvConfig, Object, ObjectKind, Scene, CLOSED_BELOW};
use crate::error::{Error, Result};
use crate::math::{self, Vec3, IDENTITY3};
use crate::scene::{GripperState, TaskId};

/// A gripper target the expert moves to, then holds for `hold` stationary
/// ticks (counting an aperture change as one).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waypoint {
    pub state: GripperState,
    pub hold: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub objects: Vec<Object>,
    pub gripper: GripperState,
    pub waypoints: Vec<Waypoint>,
}

/// Open-loop segments an episode of `task` is given.
pub fn segments(task: TaskId) -> usize {
    match task {
        TaskId::Reach => 1,
        TaskId::PickLift | TaskId::PushSlide => 2,
        TaskId::TwoStagePlace => 3,
    }
}

/// Voxel-index helper for the canonical layout: objects stay within the
/// central half of the workspace so whole-voxel shifts of up to a quarter
/// of the width keep them inside.
struct Cells<'a> {
    cfg: &'a EnvConfig,
}

impl Cells<'_> {
    fn inner(&self) -> (i64, i64) {
        let n = self.cfg.dims[0] as i64;
        (n / 4, 3 * n / 4 - 1)
    }

    fn center(&self, i: [i64; 3]) -> Vec3 {
        let r = self.cfg.resolution;
        let n = [self.cfg.dims[0] as f64, self.cfg.dims[1] as f64];
        [
            r * (i[0] as f64 + 0.5 - n[0] / 2.0),
            r * (i[1] as f64 + 0.5 - n[1] / 2.0),
            r * (i[2] as f64 + 0.5),
        ]
    }

    fn random_xy(&self, rng: &mut impl Rng) -> [i64; 2] {
        let (lo, hi) = self.inner();
        [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
    }

    fn in_inner(&self, i: [i64; 2]) -> bool {
        let (lo, hi) = self.inner();
        i.iter().all(|v| (lo..=hi).contains(v))
    }
}

fn open_at(p: Vec3) -> GripperState {
    GripperState { position: p, q: IDENTITY3, c: 1.0 }
}

fn closed_at(p: Vec3) -> GripperState {
    GripperState { position: p, q: IDENTITY3, c: 0.0 }
}

pub fn canonical_layout(task: TaskId, seed: u64, cfg: &EnvConfig) -> Result<Layout> {
    let mut rng = layout_rng(task, seed);
    let cells = Cells { cfg };
    let n = cfg.dims[0] as i64;
    let nz = cfg.dims[2] as i64;
    let lift = cfg.lift_voxels() as i64;
    let dwell = cfg.dwell_ticks;

    let g_xy = cells.random_xy(&mut rng);
    let g_z = rng.gen_range((n / 4).max(lift + 1)..=(n / 2).min(nz - 1));
    let gripper = open_at(cells.center([g_xy[0], g_xy[1], g_z]));

    let (objects, waypoints) = match task {
        TaskId::Reach => {
            let xy = cells.random_xy(&mut rng);
            let z = rng.gen_range(0..(n / 4).min(g_z));
            let p = cells.center([xy[0], xy[1], z]);
            let target = make_object(cfg, ObjectKind::Target, p, &mut rng);
            (vec![target], vec![Waypoint { state: open_at(p), hold: 1 }])
        }
        TaskId::PickLift => {
            let xy = cells.random_xy(&mut rng);
            let p = cells.center([xy[0], xy[1], 0]);
            let apex = cells.center([xy[0], xy[1], lift]);
            let cube = make_object(cfg, ObjectKind::Cube, p, &mut rng);
            (
                vec![cube],
                vec![Waypoint { state: closed_at(p), hold: dwell }, Waypoint { state: closed_at(apex), hold: 1 }],
            )
        }
        TaskId::PushSlide => {
            let (xy, dir) = loop {
                let xy = cells.random_xy(&mut rng);
                let dir: [i64; 2] = [[1, 0], [0, 1], [-1, 0], [0, -1]][rng.gen_range(0..4)];
                let behind = [xy[0] - dir[0], xy[1] - dir[1]];
                let past_goal = [xy[0] + 2 * dir[0], xy[1] + 2 * dir[1]];
                if cells.in_inner(behind) && cells.in_inner(past_goal) {
                    break (xy, dir);
                }
            };
            let p = cells.center([xy[0], xy[1], 0]);
            let behind = cells.center([xy[0] - dir[0], xy[1] - dir[1], 0]);
            let end = cells.center([xy[0] + dir[0], xy[1] + dir[1], 0]);
            let half = cfg.resolution / 2.0;
            let goal = math::add(end, [dir[0] as f64 * half, dir[1] as f64 * half, 0.0]);
            let cube = make_object(cfg, ObjectKind::Cube, p, &mut rng);
            let pad = make_object(cfg, ObjectKind::Pad, goal, &mut rng);
            (
                vec![cube, pad],
                vec![Waypoint { state: closed_at(behind), hold: dwell }, Waypoint { state: closed_at(end), hold: 1 }],
            )
        }
        TaskId::TwoStagePlace => {
            let (a, b) = loop {
                let a = cells.random_xy(&mut rng);
                let b = cells.random_xy(&mut rng);
                if (a[0] - b[0]).abs().max((a[1] - b[1]).abs()) >= 2 {
                    break (a, b);
                }
            };
            let p = cells.center([a[0], a[1], 0]);
            let apex = cells.center([a[0], a[1], lift]);
            let place = cells.center([b[0], b[1], 0]);
            let cube = make_object(cfg, ObjectKind::Cube, p, &mut rng);
            let pad = make_object(cfg, ObjectKind::Pad, place, &mut rng);
            (
                vec![cube, pad],
                vec![
                    Waypoint { state: closed_at(p), hold: dwell },
                    Waypoint { state: closed_at(apex), hold: dwell },
                    Waypoint { state: open_at(place), hold: 1 },
                ],
            )
        }
    };
    if waypoints.len() != segments(task) {
        return Err(Error::Unsolvable(format!("{} layout produced {} waypoints", task.name(), waypoints.len())));
    }
    Ok(Layout { objects, gripper, waypoints })
}

fn xy_dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn find(scene: &Scene, kind: ObjectKind) -> Option<&Object> {
    scene.objects.iter().find(|o| o.kind == kind)
}

/// Task success from relative geometry only.
pub fn success(scene: &Scene) -> bool {
    match scene.task {
        TaskId::Reach => find(scene, ObjectKind::Target)
            .is_some_and(|t| math::norm(math::sub(scene.gripper.position, t.center)) <= 0.005),
        TaskId::PickLift => {
            scene.attached.is_some()
                && scene.gripper.c < CLOSED_BELOW
                && scene.cube().is_some_and(|c| c.center[2] - scene.start_z >= 0.06 - 1e-12)
        }
        TaskId::PushSlide => match (scene.cube(), find(scene, ObjectKind::Pad)) {
            (Some(c), Some(p)) => xy_dist(c.center, p.center) <= 0.01,
            _ => false,
        },
        TaskId::TwoStagePlace => match (scene.cube(), find(scene, ObjectKind::Pad)) {
            (Some(c), Some(p)) => scene.attached.is_none() && c.center[2] == c.rest_z && xy_dist(c.center, p.center) <= 0.01,
            _ => false,
        },
    }
}
