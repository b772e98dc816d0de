//! Noise predictor: an equivariant MLP over the noisy action vector, the
//! gripper history, a coarse local occupancy/color grid and a sinusoidal
//! step embedding.
//!
//! The MLP outputs an estimate `f` of the clean action and the noise
//! prediction is `ε = (a^k − sqrt(ᾱ_k) f) / sqrt(1 − ᾱ_k)`. Both terms
//! transform like the action, so ε keeps the MLP's equivariance, and the
//! noise MSE equals `ᾱ_k / (1 − ᾱ_k) ‖f − a^0‖²` exactly.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::diffusion::{action_rep, encode_state, DiffusionSchedule, STEP_DIM};
use crate::equinet::layers::{nonlinearity, EqLinear};
use crate::equinet::rep::{Block, Rep};
use crate::equinet::tape::{dot, NodeId, Tape};
use crate::equinet::{cast, ParamStore, Real};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::Observation;
use crate::voxel::{rasterize, RasterMode, VoxelGridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsConfig {
    /// Regular fields per hidden layer.
    pub hidden: usize,
    pub layers: usize,
    pub step_embed: usize,
    /// Local grid cells along x, y, z around the frame origin.
    pub local_dims: [usize; 3],
    pub local_res: f64,
    /// Positions are divided by this before entering the network.
    pub pos_scale: f64,
}

impl Default for EpsConfig {
    fn default() -> Self {
        Self { hidden: 16, layers: 3, step_embed: 16, local_dims: [4, 4, 4], local_res: 0.0625, pos_scale: 0.25 }
    }
}

/// Shape facts the predictor is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpsShape {
    pub m: usize,
    pub u: u32,
    pub kf: usize,
    pub t_hist: usize,
    pub t_act: usize,
    /// Without frame transfer the keypose is appended to the conditioning.
    pub frame_transfer: bool,
}

#[derive(Clone, Debug)]
pub struct EpsNet {
    pub cfg: EpsConfig,
    pub shape: EpsShape,
    pub action_rep: Arc<Rep>,
    pub cond_rep: Arc<Rep>,
    pub in_rep: Arc<Rep>,
    pub sched: DiffusionSchedule,
    local_spec: VoxelGridSpec,
    layers: Vec<EqLinear>,
    /// Linear path from input to output alongside the MLP.
    skip: EqLinear,
}

impl EpsNet {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EpsConfig,
        shape: EpsShape,
        sched: &DiffusionSchedule,
        tied: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 {
            return Err(Error::Config("noise predictor needs >= 1 hidden layer of width >= 1".into()));
        }
        if cfg.step_embed % 2 != 0 {
            return Err(Error::Config("step embedding width must be even".into()));
        }
        if !(cfg.pos_scale > 0.0) {
            return Err(Error::Config("pos_scale must be > 0".into()));
        }
        let u = shape.u;
        let local_spec = VoxelGridSpec::centered(
            cfg.local_res,
            cfg.local_dims,
            -cfg.local_res * cfg.local_dims[2] as f64 / 2.0,
            usize::MAX,
        )?;
        let action = action_rep(shape.m, u)?;
        let history = action_rep(shape.t_hist + shape.t_act, u)?;
        let grid = Rep::grid(cfg.local_dims, &Rep::trivial(1 + shape.kf, u))?;
        let mut parts: Vec<Arc<Rep>> = vec![history, grid];
        if !shape.frame_transfer {
            parts.push(Rep::from_blocks(&[Block::Standard, Block::Trivial], u)?);
        }
        let cond_rep = Rep::sum(&parts.iter().map(|p| p.as_ref()).collect::<Vec<_>>())?;
        let step = Rep::trivial(cfg.step_embed.max(1), u);
        let in_rep = if cfg.step_embed > 0 {
            Rep::sum(&[&action, &cond_rep, &step])?
        } else {
            Rep::sum(&[&action, &cond_rep])?
        };
        let hid = Rep::regular(cfg.hidden, u);
        let mut layers = Vec::new();
        layers.push(EqLinear::new(store, "low.eps.in", in_rep.clone(), hid.clone(), true, tied, 1.0, rng)?);
        for i in 1..cfg.layers {
            layers.push(EqLinear::new(store, &format!("low.eps.h{i}"), hid.clone(), hid.clone(), true, tied, 1.0, rng)?);
        }
        layers.push(EqLinear::new(store, "low.eps.out", hid, action.clone(), true, tied, 0.5, rng)?);
        let skip = EqLinear::new(store, "low.eps.skip", in_rep.clone(), action.clone(), false, tied, 0.5, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            shape,
            action_rep: action,
            cond_rep,
            in_rep,
            sched: sched.clone(),
            local_spec,
            layers,
            skip,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.shape.m * STEP_DIM
    }

    /// MLP layers followed by the skip layer.
    pub fn layers(&self) -> impl Iterator<Item = &EqLinear> {
        self.layers.iter().chain(std::iter::once(&self.skip))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut EqLinear> {
        self.layers.iter_mut().chain(std::iter::once(&mut self.skip))
    }

    /// Conditioning vector for an observation already expressed in the
    /// frame the predictor works in; `t_high` is only used without frame
    /// transfer.
    pub fn condition(&self, obs: &Observation, t_high: Vec3) -> Result<Vec<f64>> {
        let s = &self.shape;
        if obs.state_history.len() != s.t_hist || obs.action_history.len() != s.t_act {
            return Err(Error::ShapeMismatch(format!(
                "history {}+{} but predictor expects {}+{}",
                obs.state_history.len(),
                obs.action_history.len(),
                s.t_hist,
                s.t_act
            )));
        }
        if obs.cloud.kf() != s.kf {
            return Err(Error::FeatureWidth { header: s.kf, record: obs.cloud.kf() });
        }
        let mut out = Vec::with_capacity(self.cond_rep.dim());
        for st in obs.state_history.iter().chain(&obs.action_history) {
            encode_state(st, self.cfg.pos_scale, &mut out);
        }
        let occ = rasterize(&obs.cloud, &self.local_spec, RasterMode::Occupancy, s.u)?;
        let mean = rasterize(&obs.cloud, &self.local_spec, RasterMode::MeanFeature, s.u)?;
        out.extend_from_slice(&occ.data);
        out.extend_from_slice(&mean.data);
        if !s.frame_transfer {
            out.extend(t_high.iter().map(|v| v / self.cfg.pos_scale));
        }
        debug_assert_eq!(out.len(), self.cond_rep.dim());
        Ok(out)
    }

    pub fn step_embedding(&self, k: usize) -> Vec<f64> {
        let half = self.cfg.step_embed / 2;
        let mut out = Vec::with_capacity(self.cfg.step_embed);
        for i in 0..half {
            let f = (-(1000f64).ln() * i as f64 / half as f64).exp();
            out.push((k as f64 * f).sin());
            out.push((k as f64 * f).cos());
        }
        out
    }

    /// Network input row `[a | cond | step]`.
    pub fn input_row(&self, a: &[f64], cond: &[f64], k: usize, row: &mut Vec<f64>) {
        row.extend_from_slice(a);
        row.extend_from_slice(cond);
        row.extend(self.step_embedding(k));
    }

    /// `x: [batch, in_dim]` → clean-action estimate `[batch, action_dim]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = nonlinearity(tape, h, &l.out_rep)?;
            }
        }
        let s = self.skip.forward(tape, store, x)?;
        Ok(tape.add(h, s))
    }

    /// `(c_a, c_f)` with `ε = c_a a^k − c_f f`.
    pub fn noise_coeffs(&self, k: usize) -> (f64, f64) {
        let ab = self.sched.alpha_bar[k - 1];
        let s = (1.0 - ab).sqrt();
        (1.0 / s, ab.sqrt() / s)
    }

    /// Batch noise MSE: mean over rows of `‖ε_θ − e‖²`, computed as the
    /// equal weighted clean-action error.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, batch: &LowBatch) -> Result<NodeId> {
        let d = self.in_rep.dim();
        let b = batch.rows.len() / d;
        if batch.ks.len() != b || batch.a0.len() != b * self.action_dim() {
            return Err(Error::ShapeMismatch(format!("low batch of {b} rows has {} steps and {} targets", batch.ks.len(), batch.a0.len())));
        }
        let x = tape.constant(cast(&batch.rows), vec![b, d]);
        let f = self.forward(tape, store, x)?;
        let w: Vec<f64> = batch.ks.iter().map(|&k| self.noise_coeffs(k).1.powi(2)).collect();
        Ok(tape.weighted_row_sq_err(f, cast(&batch.a0), &w))
    }

    /// Noise prediction from the frozen MLP for one input row.
    pub fn predict_noise(&self, frozen: &FrozenMlp, row: &[f64], a: &[f64], k: usize) -> Vec<f64> {
        let f = frozen.forward(row);
        let (ca, cf) = self.noise_coeffs(k);
        a.iter().zip(&f).map(|(a, f)| ca * a - cf * f).collect()
    }

    /// Effective weights captured once for repeated inference.
    pub fn freeze(&self, store: &ParamStore) -> FrozenMlp {
        let frozen = |l: &EqLinear| FrozenLayer {
            w: l.effective_weight(store),
            b: l.effective_bias(store),
            n_in: l.in_rep.dim(),
            n_out: l.out_rep.dim(),
        };
        FrozenMlp { layers: self.layers.iter().map(frozen).collect(), skip: frozen(&self.skip) }
    }
}

#[derive(Clone, Debug)]
struct FrozenLayer {
    w: Vec<f64>,
    b: Option<Vec<f64>>,
    n_in: usize,
    n_out: usize,
}

/// Stacked training examples for one low-level batch.
#[derive(Clone, Debug, Default)]
pub struct LowBatch {
    /// Network input rows `[a^k | cond | step]`.
    pub rows: Vec<f64>,
    /// Clean action vectors.
    pub a0: Vec<f64>,
    /// Noise that produced each `a^k`.
    pub noise: Vec<f64>,
    pub ks: Vec<usize>,
}

impl FrozenLayer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_out];
        for (c, yc) in y.iter_mut().enumerate() {
            *yc = dot(x, &self.w[c * self.n_in..(c + 1) * self.n_in]);
        }
        if let Some(b) = &self.b {
            for (yc, bc) in y.iter_mut().zip(b) {
                *yc += *bc;
            }
        }
        y
    }
}

/// Plain forward pass with fixed effective weights; same arithmetic as
/// the tape at 64-bit.
#[derive(Clone, Debug)]
pub struct FrozenMlp {
    layers: Vec<FrozenLayer>,
    skip: FrozenLayer,
}

impl FrozenMlp {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = l.apply(&h);
            if i + 1 < self.layers.len() {
                for v in &mut y {
                    *v /= 1.0 + (-*v).exp();
                }
            }
            h = y;
        }
        for (a, b) in h.iter_mut().zip(self.skip.apply(x)) {
            *a += b;
        }
        h
    }
}
