//! Observation / action data model, keyframe extraction and training-pair
//! construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::GroupElement;
use crate::math::{self, Mat3, Vec3};

/// Tolerance on `qᵀq = I`, `det q = 1` for a stored orientation.
pub const ROTATION_TOL: f64 = 1e-9;

/// Gripper pose and aperture. `q` is a row-major rotation matrix; `c` is the
/// opening in [0, 1] (1 = fully open).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GripperState {
    pub position: Vec3,
    pub q: Mat3,
    pub c: f64,
}

impl GripperState {
    pub fn new(position: Vec3, q: Mat3, c: f64) -> Result<Self> {
        let s = Self { position, q, c };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let err = math::rotation_error(&self.q);
        if !(err <= ROTATION_TOL) {
            return Err(Error::InvalidRotation(err));
        }
        if !(0.0..=1.0).contains(&self.c) {
            return Err(Error::InvalidState(format!("aperture {} outside [0, 1]", self.c)));
        }
        if self.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite position".into()));
        }
        Ok(())
    }

    pub fn is_closed(&self, threshold: f64) -> bool {
        self.c < threshold
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self { position: math::add(self.position, t), ..*self }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut e = math::max_abs_diff(&self.q, &other.q);
        for k in 0..3 {
            e = e.max((self.position[k] - other.position[k]).abs());
        }
        e.max((self.c - other.c).abs())
    }
}

/// A single point with its feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub position: Vec3,
    pub features: Vec<f64>,
}

/// Point cloud stored as parallel position / flat feature arrays with a
/// fixed per-cloud feature width `kf`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    kf: usize,
    positions: Vec<Vec3>,
    features: Vec<f64>,
}

impl PointCloud {
    pub fn new(kf: usize) -> Self {
        Self { kf, positions: Vec::new(), features: Vec::new() }
    }

    pub fn from_parts(kf: usize, positions: Vec<Vec3>, features: Vec<f64>) -> Result<Self> {
        if features.len() != positions.len() * kf {
            return Err(Error::FeatureWidth {
                header: kf,
                record: if positions.is_empty() { features.len() } else { features.len() / positions.len() },
            });
        }
        if positions.iter().flatten().chain(features.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point cloud contains non-finite values".into()));
        }
        Ok(Self { kf, positions, features })
    }

    pub fn push(&mut self, position: Vec3, features: &[f64]) -> Result<()> {
        if features.len() != self.kf {
            return Err(Error::FeatureWidth { header: self.kf, record: features.len() });
        }
        self.positions.push(position);
        self.features.extend_from_slice(features);
        Ok(())
    }

    pub fn kf(&self) -> usize {
        self.kf
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [Vec3] {
        &mut self.positions
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.kf..(i + 1) * self.kf]
    }

    pub fn point(&self, i: usize) -> Point {
        Point { position: self.positions[i], features: self.feature(i).to_vec() }
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            kf: self.kf,
            positions: self.positions.iter().map(|p| math::add(*p, t)).collect(),
            features: self.features.clone(),
        }
    }

    pub fn append(&mut self, other: &PointCloud) -> Result<()> {
        if other.kf != self.kf {
            return Err(Error::FeatureWidth { header: self.kf, record: other.kf });
        }
        self.positions.extend_from_slice(&other.positions);
        self.features.extend_from_slice(&other.features);
        Ok(())
    }
}

/// Point cloud plus gripper state / action history, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub cloud: PointCloud,
    pub state_history: Vec<GripperState>,
    pub action_history: Vec<GripperState>,
}

impl Observation {
    pub fn new(
        cloud: PointCloud,
        state_history: Vec<GripperState>,
        action_history: Vec<GripperState>,
    ) -> Result<Self> {
        if state_history.is_empty() {
            return Err(Error::InvalidArgument("observation needs at least one state".into()));
        }
        Ok(Self { cloud, state_history, action_history })
    }

    pub fn current_state(&self) -> &GripperState {
        self.state_history.last().expect("non-empty state history")
    }

    /// Shift every positional component by `t`.
    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            cloud: self.cloud.translated(t),
            state_history: self.state_history.iter().map(|s| s.translated(t)).collect(),
            action_history: self.action_history.iter().map(|s| s.translated(t)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.cloud.len() != other.cloud.len()
            || self.state_history.len() != other.state_history.len()
            || self.action_history.len() != other.action_history.len()
        {
            return f64::INFINITY;
        }
        let mut e: f64 = 0.0;
        for (a, b) in self.cloud.positions().iter().zip(other.cloud.positions()) {
            for k in 0..3 {
                e = e.max((a[k] - b[k]).abs());
            }
        }
        for (a, b) in self.cloud.features().iter().zip(other.cloud.features()) {
            e = e.max((a - b).abs());
        }
        for (a, b) in self
            .state_history
            .iter()
            .chain(&self.action_history)
            .zip(other.state_history.iter().chain(&other.action_history))
        {
            e = e.max(a.max_abs_diff(b));
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub steps: Vec<GripperState>,
}

impl ActionChunk {
    pub fn new(steps: Vec<GripperState>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("action chunk needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> &GripperState {
        self.steps.last().expect("non-empty chunk")
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self { steps: self.steps.iter().map(|s| s.translated(t)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        self.steps
            .iter()
            .zip(&other.steps)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    Reach,
    PickLift,
    PushSlide,
    TwoStagePlace,
}

impl TaskId {
    pub fn code(self) -> u32 {
        match self {
            TaskId::Reach => 0,
            TaskId::PickLift => 1,
            TaskId::PushSlide => 2,
            TaskId::TwoStagePlace => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => TaskId::Reach,
            1 => TaskId::PickLift,
            2 => TaskId::PushSlide,
            3 => TaskId::TwoStagePlace,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::PickLift => "pick-lift",
            TaskId::PushSlide => "push-slide",
            TaskId::TwoStagePlace => "two-stage-place",
        }
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "reach" => TaskId::Reach,
            "pick-lift" => TaskId::PickLift,
            "push-slide" => TaskId::PushSlide,
            "two-stage-place" => TaskId::TwoStagePlace,
            other => return Err(Error::Config(format!("unknown task {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub tick: u64,
    pub obs: Observation,
    /// Gripper state after executing this tick's command.
    pub state: GripperState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoMeta {
    pub task: TaskId,
    pub seed: u64,
    pub transform: GroupElement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub frames: Vec<Frame>,
    pub meta: DemoMeta,
}

impl Demonstration {
    pub fn new(frames: Vec<Frame>, meta: DemoMeta) -> Result<Self> {
        let d = Self { frames, meta };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InvalidDemo(format!("{} frames (need >= 2)", self.frames.len())));
        }
        if self.frames.windows(2).any(|w| w[1].tick <= w[0].tick) {
            return Err(Error::InvalidDemo("ticks not strictly increasing".into()));
        }
        let kf = self.frames[0].obs.cloud.kf();
        if let Some(f) = self.frames.iter().find(|f| f.obs.cloud.kf() != kf) {
            return Err(Error::FeatureWidth { header: kf, record: f.obs.cloud.kf() });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn state(&self, i: usize) -> &GripperState {
        &self.frames[i].state
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub obs: Observation,
    pub target_chunk: ActionChunk,
    pub target_keypose: Vec3,
}

impl TrainingPair {
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut e = self.obs.max_abs_diff(&other.obs).max(self.target_chunk.max_abs_diff(&other.target_chunk));
        for k in 0..3 {
            e = e.max((self.target_keypose[k] - other.target_keypose[k]).abs());
        }
        e
    }

    pub fn transformed(&self, g: &GroupElement) -> Result<Self> {
        Ok(Self {
            obs: g.act_observation(&self.obs)?,
            target_chunk: g.act_chunk(&self.target_chunk)?,
            target_keypose: g.act_position(self.target_keypose),
        })
    }
}

/// Keyframe heuristic parameters: aperture threshold crossings and dwell
/// runs (speed below `dwell_speed` m/tick for at least `dwell_ticks` ticks).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeConfig {
    pub aperture_threshold: f64,
    pub dwell_speed: f64,
    pub dwell_ticks: usize,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self { aperture_threshold: 0.5, dwell_speed: 1e-3, dwell_ticks: 4 }
    }
}

/// Keyframe indices: aperture crossings, the first tick of each dwell run,
/// and always the final frame. Strictly increasing.
pub fn extract_keyframes(demo: &Demonstration, cfg: &KeyframeConfig) -> Result<Vec<usize>> {
    demo.validate()?;
    let n = demo.len();
    let mut keys = Vec::new();

    let speed = |t: usize| -> f64 {
        let (a, b) = if t == 0 { (0, 1) } else { (t - 1, t) };
        math::norm(math::sub(demo.state(b).position, demo.state(a).position))
    };

    let mut run_start: Option<usize> = None;
    for t in 0..n {
        if t > 0 {
            let was = demo.state(t - 1).is_closed(cfg.aperture_threshold);
            let now = demo.state(t).is_closed(cfg.aperture_threshold);
            if was != now {
                keys.push(t);
            }
        }
        if speed(t) < cfg.dwell_speed {
            let start = *run_start.get_or_insert(t);
            if t + 1 - start == cfg.dwell_ticks.max(1) {
                keys.push(start);
            }
        } else {
            run_start = None;
        }
    }
    keys.push(n - 1);
    keys.sort_unstable();
    keys.dedup();
    Ok(keys)
}

/// Prepends the demo start to a keyframe list so the first open-loop
/// segment starts at frame 0.
pub fn segment_boundaries(keyframes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(keyframes.len() + 1);
    if keyframes.first() != Some(&0) {
        out.push(0);
    }
    out.extend_from_slice(keyframes);
    out
}

/// `m` steps at fractions 1/m .. 1 from `a` to `b`: linear positions,
/// constant-angular-velocity orientations, and `a`'s aperture until the
/// final step, which is `b` exactly.
pub fn interpolate_segment(a: &GripperState, b: &GripperState, m: usize) -> Result<ActionChunk> {
    if m == 0 {
        return Err(Error::InvalidArgument("horizon m must be >= 1".into()));
    }
    let rel = math::log_so3(&math::mat_mul(&math::transpose(&a.q), &b.q));
    let mut steps = Vec::with_capacity(m);
    for i in 1..m {
        let f = i as f64 / m as f64;
        let position = math::add(a.position, math::scale(math::sub(b.position, a.position), f));
        let q = math::mat_mul(&a.q, &math::exp_so3(math::scale(rel, f)));
        steps.push(GripperState { position, q, c: a.c });
    }
    steps.push(*b);
    ActionChunk::new(steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    Open,
    Closed,
}

impl std::str::FromStr for ControlMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(ControlMode::Open),
            "closed" => Ok(ControlMode::Closed),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

pub fn make_training_pairs(
    demo: &Demonstration,
    mode: ControlMode,
    m: usize,
    keyframes: &[usize],
) -> Result<Vec<TrainingPair>> {
    demo.validate()?;
    if keyframes.len() < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 keyframes, got {}", keyframes.len())));
    }
    if keyframes.windows(2).any(|w| w[1] <= w[0]) || *keyframes.last().unwrap() >= demo.len() {
        return Err(Error::InvalidArgument("keyframes must be strictly increasing frame indices".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("horizon m must be >= 1".into()));
    }
    let mut pairs = Vec::new();
    match mode {
        ControlMode::Open => {
            for w in keyframes.windows(2) {
                let (ka, kb) = (w[0], w[1]);
                pairs.push(TrainingPair {
                    obs: demo.frames[ka].obs.clone(),
                    target_chunk: interpolate_segment(demo.state(ka), demo.state(kb), m)?,
                    target_keypose: demo.state(kb).position,
                });
            }
        }
        ControlMode::Closed => {
            let n = demo.len();
            for t in 0..n - 1 {
                let steps = (1..=m).map(|j| *demo.state((t + j).min(n - 1))).collect();
                let next_key = keyframes.iter().copied().find(|&k| k > t).unwrap_or(n - 1);
                pairs.push(TrainingPair {
                    obs: demo.frames[t].obs.clone(),
                    target_chunk: ActionChunk::new(steps)?,
                    target_keypose: demo.state(next_key).position,
                });
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{rot_z, IDENTITY3};

    fn state(p: Vec3, c: f64) -> GripperState {
        GripperState::new(p, IDENTITY3, c).unwrap()
    }

    fn demo_from_states(states: Vec<GripperState>) -> Demonstration {
        let frames = states
            .into_iter()
            .enumerate()
            .map(|(i, s)| Frame {
                tick: i as u64,
                obs: Observation::new(PointCloud::new(3), vec![s], vec![s; 3]).unwrap(),
                state: s,
            })
            .collect();
        Demonstration::new(
            frames,
            DemoMeta { task: TaskId::Reach, seed: 0, transform: GroupElement::identity(4) },
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_states() {
        let mut q = IDENTITY3;
        q[0][0] = 2.0;
        assert!(matches!(GripperState::new([0.0; 3], q, 0.5), Err(Error::InvalidRotation(_))));
        assert!(GripperState::new([0.0; 3], IDENTITY3, 1.5).is_err());
    }

    #[test]
    fn keyframes_threshold_crossing() {
        let states = (0..30)
            .map(|i| state([0.01 * i as f64, 0.0, 0.0], if i < 17 { 1.0 } else { 0.0 }))
            .collect();
        let demo = demo_from_states(states);
        assert_eq!(extract_keyframes(&demo, &KeyframeConfig::default()).unwrap(), vec![17, 29]);
    }

    #[test]
    fn keyframes_static_demo() {
        let demo = demo_from_states(vec![state([0.1, 0.2, 0.3], 1.0); 10]);
        assert_eq!(extract_keyframes(&demo, &KeyframeConfig::default()).unwrap(), vec![0, 9]);
    }

    #[test]
    fn demo_too_short() {
        let s = state([0.0; 3], 1.0);
        let frames = vec![Frame {
            tick: 0,
            obs: Observation::new(PointCloud::new(3), vec![s], vec![]).unwrap(),
            state: s,
        }];
        let r = Demonstration::new(
            frames,
            DemoMeta { task: TaskId::Reach, seed: 0, transform: GroupElement::identity(4) },
        );
        assert!(matches!(r, Err(Error::InvalidDemo(_))));
    }

    #[test]
    fn interpolation_basics() {
        let a = state([0.0, 0.0, 0.0], 1.0);
        let b = state([1.0, 2.0, -2.0], 0.0);
        let c = interpolate_segment(&a, &a, 5).unwrap();
        assert!(c.steps.iter().all(|s| s == &a));
        let c = interpolate_segment(&a, &b, 2).unwrap();
        assert_eq!(c.steps[0].position, [0.5, 1.0, -1.0]);
        assert_eq!(c.steps[0].c, 1.0);
        assert_eq!(c.steps[1], b);
    }

    #[test]
    fn interpolation_half_turn_angles() {
        let a = state([0.0; 3], 1.0);
        let b = GripperState::new([0.0; 3], rot_z(std::f64::consts::PI), 1.0).unwrap();
        let c = interpolate_segment(&a, &b, 4).unwrap();
        for (i, s) in c.steps.iter().enumerate() {
            // Oracle: angle from the matrix log of the relative rotation.
            let w = math::log_so3(&math::mat_mul(&math::transpose(&a.q), &s.q));
            let expect = std::f64::consts::FRAC_PI_4 * (i + 1) as f64;
            assert!((math::norm(w) - expect).abs() < 1e-9, "step {i}");
            assert!(w[0].abs() < 1e-9 && w[1].abs() < 1e-9);
            assert!(math::rotation_error(&s.q) < 1e-12);
        }
    }

    #[test]
    fn pair_counts() {
        let states: Vec<_> = (0..12).map(|i| state([0.02 * i as f64, 0.0, 0.0], 1.0)).collect();
        let demo = demo_from_states(states);
        let open = make_training_pairs(&demo, ControlMode::Open, 6, &[0, 11]).unwrap();
        assert_eq!(open.len(), 1);
        assert_eq!(open[0].target_chunk.last(), demo.state(11));
        assert_eq!(open[0].target_keypose, demo.state(11).position);
        let closed = make_training_pairs(&demo, ControlMode::Closed, 6, &[0, 11]).unwrap();
        assert_eq!(closed.len(), 11);
        // Padding repeats the final state past the demo end.
        assert_eq!(closed[10].target_chunk.steps[5], *demo.state(11));
        assert!(make_training_pairs(&demo, ControlMode::Open, 6, &[11]).is_err());
    }

    #[test]
    fn boundaries_prepend_start() {
        assert_eq!(segment_boundaries(&[5, 9]), vec![0, 5, 9]);
        assert_eq!(segment_boundaries(&[0, 9]), vec![0, 9]);
    }
}
