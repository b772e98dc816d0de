//! Run configuration: one TOML file with every knob, validated up front.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::rollout::TransformDist;
use crate::env::EnvConfig;
use crate::equinet::unet::UNetConfig;
use crate::error::{Error, Result};
use crate::group::RepSpec;
use crate::low_level::EpsConfig;
use crate::scene::{ControlMode, KeyframeConfig, TaskId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Keypose passed as conditioning instead of shifting the frame.
    NoFt,
    /// Untied weights: same architecture without symmetry constraints.
    NoEqui,
    /// Occupancy + color rasterization instead of the per-voxel encoder.
    NoStackedVoxel,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Ablation::Full,
            "no-ft" => Ablation::NoFt,
            "no-equi" => Ablation::NoEqui,
            "no-stacked-voxel" => Ablation::NoStackedVoxel,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub u: u32,
    pub max_points_per_voxel: usize,
    /// Regular fields in the per-voxel encoder's hidden layers.
    pub pointnet_hidden: usize,
    /// Output type of the per-voxel encoder, e.g. `"2x0+0x1+2xreg/C4"`.
    pub stacked_out: String,
    pub unet: UNetConfig,
    pub eps: EpsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            u: 4,
            max_points_per_voxel: 6,
            pointnet_hidden: 4,
            stacked_out: "2x0+0x1+2xreg/C4".into(),
            unet: UNetConfig::default(),
            eps: EpsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-3, beta_end: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over `train.iterations`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// High-level examples per iteration.
    pub batch: usize,
    /// Low-level examples per iteration; they are far cheaper than
    /// high-level ones, and the denoiser needs many more of them.
    pub low_batch: usize,
}

impl OptimConfig {
    /// Learning rate for 1-based iteration `iter` of `total`.
    pub fn lr_at(&self, iter: u64, total: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = (iter.saturating_sub(1)) as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-4, schedule: LrSchedule::Cosine, weight_decay: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch: 16, low_batch: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 1000, checkpoint_every: 250 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub count: usize,
    pub seed: u64,
    pub transforms: TransformDist,
    /// Largest tolerated fraction of seeds the expert cannot solve.
    pub max_unsolvable: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { count: 20, seed: 0, transforms: TransformDist::default(), max_unsolvable: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub transforms: TransformDist,
    pub policy_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, seed: 10_000, transforms: TransformDist::default(), policy_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub eval_csv: PathBuf,
    pub audit_report: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            dataset: "run/demos.hepd".into(),
            checkpoint: "run/model.hepc".into(),
            metrics: "run/metrics.csv".into(),
            eval_csv: "run/eval.csv".into(),
            audit_report: "run/audit.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskId,
    pub mode: ControlMode,
    pub ablation: Ablation,
    pub seed: u64,
    /// Prediction horizon in steps.
    pub m: usize,
    pub t_hist: usize,
    pub t_act: usize,
    pub env: EnvConfig,
    pub keyframes: KeyframeConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub demos: DemoConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskId::PickLift,
            mode: ControlMode::Open,
            ablation: Ablation::Full,
            seed: 0,
            m: 18,
            t_hist: 1,
            t_act: 3,
            env: EnvConfig::default(),
            keyframes: KeyframeConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            demos: DemoConfig::default(),
            eval: EvalConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Parses `text`, applies `key.path=value` overrides (values in TOML
    /// syntax, bare strings allowed), then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stacked_out(&self) -> Result<RepSpec> {
        self.model.stacked_out.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let c = |msg: String| Err(Error::Config(msg));
        self.env.validate()?;
        if self.m == 0 {
            return c("m must be >= 1".into());
        }
        if self.t_hist == 0 {
            return c("t_hist must be >= 1".into());
        }
        let u = self.model.u;
        if u == 0 || u % 4 != 0 {
            return c(format!("group order u = {u} must be a positive multiple of 4 (quarter turns act on the voxel grid)"));
        }
        let so = self.stacked_out()?;
        if so.u != u {
            return c(format!("stacked_out group order {} differs from model u {u}", so.u));
        }
        if so.n1 != 0 {
            return c("stacked_out cannot contain standard fields".into());
        }
        if self.model.max_points_per_voxel == 0 || self.model.pointnet_hidden == 0 {
            return c("max_points_per_voxel and pointnet_hidden must be >= 1".into());
        }
        let q = 1usize << self.model.unet.depth;
        if self.model.unet.width == 0 || self.model.unet.depth == 0 || self.model.unet.kernel % 2 == 0 {
            return c("unet width/depth must be >= 1 and kernel odd".into());
        }
        if self.env.dims.iter().any(|d| d % q != 0) {
            return c(format!("workspace dims {:?} not divisible by 2^depth = {q}", self.env.dims));
        }
        let e = &self.model.eps;
        if e.hidden == 0 || e.layers == 0 || e.step_embed % 2 != 0 || !(e.pos_scale > 0.0) || !(e.local_res > 0.0) {
            return c("eps: hidden/layers >= 1, even step_embed, positive pos_scale and local_res required".into());
        }
        if e.local_dims[0] != e.local_dims[1] || e.local_dims.iter().any(|&d| d == 0) {
            return c(format!("eps.local_dims {:?} must be non-zero and square in xy", e.local_dims));
        }
        let d = &self.diffusion;
        if d.steps == 0 || !(d.beta_start > 0.0 && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return c("diffusion: steps >= 1 and 0 < beta_start <= beta_end < 1 required".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return c("optim: lr > 0, weight_decay >= 0, betas in [0, 1), eps > 0 required".into());
        }
        if o.batch == 0 || o.low_batch == 0 {
            return c("optim.batch and optim.low_batch must be >= 1".into());
        }
        if self.train.checkpoint_every == 0 {
            return c("train.checkpoint_every must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.demos.max_unsolvable) {
            return c("demos.max_unsolvable must be in [0, 1]".into());
        }
        self.demos.transforms.validate(&self.env)?;
        self.eval.transforms.validate(&self.env)?;
        if !(self.keyframes.dwell_speed > 0.0) || self.keyframes.dwell_ticks == 0 || self.keyframes.dwell_ticks > self.env.dwell_ticks {
            return c("keyframes: dwell_speed > 0 and 1 <= dwell_ticks <= env.dwell_ticks required".into());
        }
        Ok(())
    }

    /// The subset of the config that determines parameter shapes and
    /// network behavior; stored in checkpoints and compared on load.
    pub fn model_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            ablation: Ablation,
            m: usize,
            t_hist: usize,
            t_act: usize,
            resolution: f64,
            dims: [usize; 3],
            model: &'a ModelConfig,
            diffusion: &'a DiffusionConfig,
        }
        toml::to_string(&Fingerprint {
            ablation: self.ablation,
            m: self.m,
            t_hist: self.t_hist,
            t_act: self.t_act,
            resolution: self.env.resolution,
            dims: self.env.dims,
            model: &self.model,
            diffusion: &self.diffusion,
        })
        .expect("fingerprint serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[optim]\nlearning_rate = 1.0").is_err());
    }

    #[test]
    fn overrides_apply_before_validation() {
        let c = RunConfig::from_toml_with_overrides("", &["optim.lr=0.01".into(), "task=reach".into()]).unwrap();
        assert_eq!(c.optim.lr, 0.01);
        assert_eq!(c.task, TaskId::Reach);
        assert!(RunConfig::from_toml_with_overrides("", &["optim.batch=0".into()]).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["model.u=3".into()]).is_err());
    }
}
