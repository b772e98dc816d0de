//! The full two-level model assembled from a run config, and its use as a
//! rollout policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, RunConfig};
use crate::env::rollout::{Plan, Policy};
use crate::env::{Scene, POINT_FEATURES};
use crate::equinet::checkpoint::Checkpoint;
use crate::equinet::{AdamW, ParamStore};
use crate::error::{Error, Result};
use crate::high_level::{HighLevelConfig, HighLevelNet};
use crate::low_level::{pi_full, BoundEps, DiffusionSchedule, EpsNet, EpsShape, RngNoise};
use crate::scene::Observation;

#[derive(Clone, Debug)]
pub struct Model {
    pub high: HighLevelNet,
    pub low: EpsNet,
    pub store: ParamStore,
    pub sched: DiffusionSchedule,
    /// Model-defining part of the config; must match on checkpoint load.
    pub fingerprint: String,
}

impl Model {
    /// Fresh parameters drawn from an rng seeded by `cfg.seed`.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1417_0DE1);
        let mut store = ParamStore::new();
        let hl = HighLevelConfig {
            spec: cfg.env.workspace(cfg.model.max_points_per_voxel)?,
            u: cfg.model.u,
            kf: POINT_FEATURES,
            stacked: cfg.ablation != Ablation::NoStackedVoxel,
            pointnet_hidden: cfg.model.pointnet_hidden,
            stacked_out: cfg.stacked_out()?,
            unet: cfg.model.unet,
            tied: cfg.ablation != Ablation::NoEqui,
        };
        let high = HighLevelNet::new(&mut store, &hl, &mut rng)?;
        let shape = EpsShape {
            m: cfg.m,
            u: cfg.model.u,
            kf: POINT_FEATURES,
            t_hist: cfg.t_hist,
            t_act: cfg.t_act,
            frame_transfer: cfg.ablation != Ablation::NoFt,
        };
        let d = &cfg.diffusion;
        let sched = DiffusionSchedule::linear(d.steps, d.beta_start, d.beta_end)?;
        let low = EpsNet::new(&mut store, &cfg.model.eps, shape, &sched, hl.tied, &mut rng)?;
        Ok(Self { high, low, store, sched, fingerprint: cfg.model_fingerprint() })
    }

    /// Builds the architecture for `cfg` and loads the checkpoint's
    /// parameters, rejecting a checkpoint made under a different model config.
    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::build(cfg)?;
        if ck.model_config != model.fingerprint {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was trained under a different model config:\n--- checkpoint\n{}--- config\n{}",
                ck.model_config, model.fingerprint
            )));
        }
        model.store.check_compatible(&ck.store)?;
        model.store = ck.store.clone();
        Ok(model)
    }

    pub fn checkpoint(&self, iteration: u64, optimizer: Option<AdamW>) -> Checkpoint {
        Checkpoint { iteration, model_config: self.fingerprint.clone(), store: self.store.clone(), optimizer }
    }

    pub fn bind(&self) -> BoundEps<'_> {
        BoundEps::new(&self.low, &self.store)
    }

    /// Rollout policy with its own diffusion noise stream.
    pub fn policy(&self, noise_seed: u64) -> LearnedPolicy<'_> {
        LearnedPolicy { model: self, eps: self.bind(), noise: RngNoise::seeded(noise_seed) }
    }
}

/// Noise seed for one evaluation episode.
pub fn episode_noise_seed(policy_seed: u64, episode_seed: u64) -> u64 {
    policy_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ episode_seed
}

pub struct LearnedPolicy<'a> {
    model: &'a Model,
    eps: BoundEps<'a>,
    noise: RngNoise,
}

impl Policy for LearnedPolicy<'_> {
    fn plan(&mut self, _scene: &Scene, obs: &Observation) -> Result<Plan> {
        let (t, chunk) = pi_full(&self.model.high, &self.model.store, &self.eps, &self.model.sched, obs, &mut self.noise)?;
        Ok(Plan { keypose: Some(t), chunk })
    }
}
