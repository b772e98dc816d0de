//! Low-level agent: frame transfer, the diffusion sampler and the
//! composed policies.

pub mod diffusion;
pub mod eps;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use diffusion::{
    action_rep, decode_chunk, encode_chunk, DiffusionSchedule, NoiseSource, RngNoise, TransformedNoise, STEP_DIM,
};
pub use eps::{EpsConfig, EpsNet, EpsShape, FrozenMlp, LowBatch};

use crate::equinet::ParamStore;
use crate::error::{Error, Result};
use crate::high_level::{select_keypose, HighLevelNet};
use crate::math::{self, Vec3};
use crate::scene::{ActionChunk, Observation, TrainingPair};

/// `τ(o, t) = o − t` on every positional component.
pub fn frame_transfer_obs(o: &Observation, t: Vec3) -> Observation {
    o.translated(math::neg(t))
}

pub fn frame_transfer_action(a: &ActionChunk, t: Vec3) -> ActionChunk {
    a.translated(math::neg(t))
}

/// Anything that predicts diffusion noise from a conditioning vector.
pub trait Denoiser {
    fn horizon(&self) -> usize;
    fn pos_scale(&self) -> f64;
    /// When false the policy skips τ and passes the keypose as conditioning.
    fn frame_transfer(&self) -> bool;
    fn condition(&self, obs: &Observation, t_high: Vec3) -> Result<Vec<f64>>;
    fn predict(&self, cond: &[f64], a: &[f64], k: usize) -> Result<Vec<f64>>;
}

/// Trained noise predictor with effective weights resolved once.
pub struct BoundEps<'a> {
    pub net: &'a EpsNet,
    frozen: FrozenMlp,
}

impl<'a> BoundEps<'a> {
    pub fn new(net: &'a EpsNet, store: &ParamStore) -> Self {
        Self { net, frozen: net.freeze(store) }
    }
}

impl Denoiser for BoundEps<'_> {
    fn horizon(&self) -> usize {
        self.net.shape.m
    }

    fn pos_scale(&self) -> f64 {
        self.net.cfg.pos_scale
    }

    fn frame_transfer(&self) -> bool {
        self.net.shape.frame_transfer
    }

    fn condition(&self, obs: &Observation, t_high: Vec3) -> Result<Vec<f64>> {
        self.net.condition(obs, t_high)
    }

    fn predict(&self, cond: &[f64], a: &[f64], k: usize) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(self.net.in_rep.dim());
        self.net.input_row(a, cond, k, &mut row);
        Ok(self.net.predict_noise(&self.frozen, &row, a, k))
    }
}

/// Reverse DDPM chain from pure noise, decoded to a chunk in the frame the
/// conditioning was built in.
pub fn sample_trajectory(
    den: &dyn Denoiser,
    sched: &DiffusionSchedule,
    cond: &[f64],
    noise: &mut dyn NoiseSource,
) -> Result<ActionChunk> {
    let dim = den.horizon() * STEP_DIM;
    let mut a = noise.normals(dim);
    for k in (1..=sched.steps()).rev() {
        let e = den.predict(cond, &a, k)?;
        if e.len() != dim {
            return Err(Error::ShapeMismatch(format!("noise prediction has {} values, expected {dim}", e.len())));
        }
        let mut next = sched.reverse_mean(&a, &e, k);
        let std = sched.reverse_std(k);
        if k > 1 {
            let z = noise.normals(dim);
            for (v, z) in next.iter_mut().zip(z) {
                *v += std * z;
            }
        }
        if let Some(bad) = next.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k, magnitude: *bad });
        }
        let mag = diffusion::max_abs(&next);
        if mag > 1e6 {
            return Err(Error::NonFinite { step: k, magnitude: mag });
        }
        a = next;
    }
    decode_chunk(&a, den.pos_scale())
}

/// `π_low(o, t) = τ(φ(τ(o, t)), −t)`; without frame transfer the keypose
/// is conditioning only and φ works in world coordinates.
pub fn pi_low(
    den: &dyn Denoiser,
    sched: &DiffusionSchedule,
    o: &Observation,
    t_high: Vec3,
    noise: &mut dyn NoiseSource,
) -> Result<ActionChunk> {
    if den.frame_transfer() {
        let o_star = frame_transfer_obs(o, t_high);
        let cond = den.condition(&o_star, [0.0; 3])?;
        let local = sample_trajectory(den, sched, &cond, noise)?;
        Ok(frame_transfer_action(&local, math::neg(t_high)))
    } else {
        let cond = den.condition(o, t_high)?;
        sample_trajectory(den, sched, &cond, noise)
    }
}

/// `π(o) = π_low(o, π_high(o))`; returns the keypose alongside the chunk.
pub fn pi_full(
    high: &HighLevelNet,
    store: &ParamStore,
    den: &dyn Denoiser,
    sched: &DiffusionSchedule,
    o: &Observation,
    noise: &mut dyn NoiseSource,
) -> Result<(Vec3, ActionChunk)> {
    let t_high = select_keypose(&high.heatmap(store, o)?);
    let chunk = pi_low(den, sched, o, t_high, noise)?;
    Ok((t_high, chunk))
}

/// Appends one noised training example for `pair` to `batch`.
pub fn low_example(net: &EpsNet, pair: &TrainingPair, rng: &mut impl Rng, batch: &mut LowBatch) -> Result<()> {
    if pair.target_chunk.len() != net.shape.m {
        return Err(Error::ShapeMismatch(format!(
            "chunk length {} does not match horizon {}",
            pair.target_chunk.len(),
            net.shape.m
        )));
    }
    let t_n = pair.target_chunk.steps.last().expect("non-empty chunk").position;
    let (cond, a0) = if net.shape.frame_transfer {
        let o_star = frame_transfer_obs(&pair.obs, t_n);
        let a_star = frame_transfer_action(&pair.target_chunk, t_n);
        (net.condition(&o_star, [0.0; 3])?, encode_chunk(&a_star, net.cfg.pos_scale))
    } else {
        (net.condition(&pair.obs, t_n)?, encode_chunk(&pair.target_chunk, net.cfg.pos_scale))
    };
    let k = rng.gen_range(1..=net.sched.steps());
    let e: Vec<f64> = (0..a0.len()).map(|_| StandardNormal.sample(rng)).collect();
    let ak = net.sched.forward(&a0, k, &e)?;
    net.input_row(&ak, &cond, k, &mut batch.rows);
    batch.a0.extend(a0);
    batch.noise.extend(e);
    batch.ks.push(k);
    Ok(())
}

/// Noise predictor whose output depends nonlinearly on the absolute values
/// of its inputs; it has no translation symmetry of its own.
#[derive(Clone, Debug)]
pub struct PositionSensitiveStub {
    pub m: usize,
    pub pos_scale: f64,
}

impl Denoiser for PositionSensitiveStub {
    fn horizon(&self) -> usize {
        self.m
    }

    fn pos_scale(&self) -> f64 {
        self.pos_scale
    }

    fn frame_transfer(&self) -> bool {
        true
    }

    fn condition(&self, obs: &Observation, _t_high: Vec3) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for s in obs.state_history.iter().chain(&obs.action_history) {
            out.extend_from_slice(&s.position);
        }
        for p in obs.cloud.positions().iter().take(64) {
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    fn predict(&self, cond: &[f64], a: &[f64], k: usize) -> Result<Vec<f64>> {
        let s: f64 = cond.iter().enumerate().map(|(i, v)| (7.0 * v + i as f64).sin()).sum();
        Ok(a.iter().enumerate().map(|(i, v)| 0.3 * (s + 3.0 * v + 0.1 * (i + k) as f64).sin() + 0.5 * v).collect())
    }
}

/// Exact noise predictor for a dataset whose only action vector is `target`.
#[derive(Clone, Debug)]
pub struct DeltaOracle {
    pub target: Vec<f64>,
    pub sched: DiffusionSchedule,
    pub pos_scale: f64,
}

impl Denoiser for DeltaOracle {
    fn horizon(&self) -> usize {
        self.target.len() / STEP_DIM
    }

    fn pos_scale(&self) -> f64 {
        self.pos_scale
    }

    fn frame_transfer(&self) -> bool {
        true
    }

    fn condition(&self, _obs: &Observation, _t_high: Vec3) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn predict(&self, _cond: &[f64], a: &[f64], k: usize) -> Result<Vec<f64>> {
        let ab = self.sched.alpha_bar[k - 1];
        Ok(a.iter().zip(&self.target).map(|(x, t)| (x - ab.sqrt() * t) / (1.0 - ab).sqrt()).collect())
    }
}
