//! DDPM noise schedule, forward noising, reverse sampling and the action
//! vector encoding the chain runs on.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::equinet::rep::{Block, Rep};
use crate::error::{Error, Result};
use crate::lattice;
use crate::math;
use crate::scene::{ActionChunk, GripperState};

/// Values per chunk step: position (3), first two orientation columns (6), aperture (1).
pub const STEP_DIM: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    /// `beta[k-1]` for k = 1..=K.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(k: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!("beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1")));
        }
        let beta: Vec<f64> = (0..k)
            .map(|i| if k == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64 })
            .collect();
        Ok(Self::from_betas(beta))
    }

    pub fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::InvalidArgument(format!("denoising step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `a^k = sqrt(ᾱ_k) a0 + sqrt(1 - ᾱ_k) noise`.
    pub fn forward(&self, a0: &[f64], k: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_k(k)?;
        if a0.len() != noise.len() {
            return Err(Error::ShapeMismatch(format!("action {} vs noise {}", a0.len(), noise.len())));
        }
        let ab = self.alpha_bar[k - 1];
        let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(a0.iter().zip(noise).map(|(a, e)| s0 * a + s1 * e).collect())
    }

    /// Posterior mean of `a^{k-1}` given `a^k` and predicted noise.
    pub fn reverse_mean(&self, ak: &[f64], eps: &[f64], k: usize) -> Vec<f64> {
        let b = self.beta[k - 1];
        let c = b / (1.0 - self.alpha_bar[k - 1]).sqrt();
        let inv = 1.0 / self.alpha[k - 1].sqrt();
        ak.iter().zip(eps).map(|(a, e)| (a - c * e) * inv).collect()
    }

    /// Posterior std `sqrt(β̃_k)`, zero at k = 1.
    pub fn reverse_std(&self, k: usize) -> f64 {
        if k <= 1 {
            return 0.0;
        }
        let ab = self.alpha_bar[k - 1];
        let ab_prev = self.alpha_bar[k - 2];
        ((1.0 - ab_prev) / (1.0 - ab) * self.beta[k - 1]).sqrt()
    }
}

/// Source of standard-normal vectors for the diffusion chain.
pub trait NoiseSource {
    fn normals(&mut self, n: usize) -> Vec<f64>;
}

pub struct RngNoise(pub ChaCha8Rng);

impl RngNoise {
    pub fn seeded(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl NoiseSource for RngNoise {
    fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut self.0)).collect()
    }
}

/// Draws from `inner` and applies `ρ(r^m)`, so a rotated rollout sees the
/// rotated image of the canonical noise.
pub struct TransformedNoise<N> {
    pub inner: N,
    pub rep: Arc<Rep>,
    pub m: u32,
}

impl<N: NoiseSource> NoiseSource for TransformedNoise<N> {
    fn normals(&mut self, n: usize) -> Vec<f64> {
        let z = self.inner.normals(n);
        assert_eq!(n, self.rep.dim(), "transformed noise must match the rep dimension");
        self.rep.apply(self.m, &z)
    }
}

/// Representation of one encoded step: xy pairs rotate, z and aperture are invariant.
pub fn step_blocks() -> [Block; 7] {
    use Block::*;
    [Standard, Trivial, Standard, Trivial, Standard, Trivial, Trivial]
}

pub fn action_rep(m: usize, u: u32) -> Result<Arc<Rep>> {
    let blocks: Vec<Block> = (0..m).flat_map(|_| step_blocks()).collect();
    Rep::from_blocks(&blocks, u)
}

pub fn encode_state(s: &GripperState, pos_scale: f64, out: &mut Vec<f64>) {
    for k in 0..3 {
        out.push(s.position[k] / pos_scale);
    }
    for j in 0..2 {
        out.extend(math::column(&s.q, j));
    }
    out.push(2.0 * s.c - 1.0);
}

pub fn encode_chunk(chunk: &ActionChunk, pos_scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(chunk.len() * STEP_DIM);
    for s in &chunk.steps {
        encode_state(s, pos_scale, &mut out);
    }
    out
}

/// Inverse of [`encode_chunk`]: Gram-Schmidt on the orientation columns,
/// aperture clamped to [0, 1], positions snapped to the command lattice.
pub fn decode_chunk(a: &[f64], pos_scale: f64) -> Result<ActionChunk> {
    if a.is_empty() || a.len() % STEP_DIM != 0 {
        return Err(Error::ShapeMismatch(format!("action vector length {} is not a multiple of {STEP_DIM}", a.len())));
    }
    let steps = a
        .chunks(STEP_DIM)
        .map(|v| {
            let position = lattice::snap3([v[0] * pos_scale, v[1] * pos_scale, v[2] * pos_scale]);
            let c0 = [v[3], v[4], v[5]];
            let c1 = [v[6], v[7], v[8]];
            let q = if math::norm(c0) < 1e-12 || math::norm(math::cross(c0, c1)) < 1e-12 {
                math::IDENTITY3
            } else {
                math::orthonormalize(c0, c1)
            };
            GripperState { position, q, c: ((v[9] + 1.0) / 2.0).clamp(0.0, 1.0) }
        })
        .collect();
    ActionChunk::new(steps)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_sanity() {
        let s = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[99] < 0.05);
        assert!(s.beta.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn forward_of_zero_is_scaled_noise() {
        let s = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        let noise = [0.3, -1.2, 2.0];
        let ak = s.forward(&[0.0; 3], 50, &noise).unwrap();
        let f = (1.0 - s.alpha_bar[49]).sqrt();
        assert_eq!(ak, noise.iter().map(|e| f * e).collect::<Vec<_>>());
        assert!(s.forward(&[0.0; 3], 0, &noise).is_err());
        assert!(s.forward(&[0.0; 3], 101, &noise).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let q = math::exp_so3([0.3, -0.2, 1.1]);
        let s = GripperState::new([0.125, -0.0625, 0.25], q, 1.0).unwrap();
        let t = GripperState::new([0.0, 0.5, 0.03125], math::IDENTITY3, 0.0).unwrap();
        let chunk = ActionChunk::new(vec![s, t]).unwrap();
        let back = decode_chunk(&encode_chunk(&chunk, 0.25), 0.25).unwrap();
        for (a, b) in chunk.steps.iter().zip(&back.steps) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.c, b.c);
            assert!(math::max_abs_diff(&a.q, &b.q) < 1e-9);
        }
    }
}
