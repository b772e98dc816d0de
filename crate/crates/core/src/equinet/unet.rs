//! Equivariant encoder-decoder producing one logit per voxel.
//!
//! The encoder widens its receptive field with dilated convolutions
//! (dilation 1, 2, .., 2^depth) rather than strided downsampling, so every
//! stage stays at full resolution and commutes exactly with whole-voxel
//! shifts and quarter turns about the grid center. The decoder mirrors the
//! encoder with skip concatenations; a global-mean branch at the bottleneck
//! supplies scene-wide context.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{nonlinearity, EqConv3d, EqLinear};
use super::params::ParamStore;
use super::rep::Rep;
use super::tape::{NodeId, Padding, Tape};
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Regular fields per hidden layer.
    pub width: usize,
    pub depth: usize,
    pub kernel: usize,
    pub circular: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { width: 2, depth: 2, kernel: 3, circular: true }
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub in_rep: Arc<Rep>,
    hid: Arc<Rep>,
    enc: Vec<EqConv3d>,
    global: EqLinear,
    dec: Vec<EqConv3d>,
    head: EqConv3d,
}

impl UNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_rep: Arc<Rep>,
        cfg: UNetConfig,
        tied: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.width == 0 || cfg.depth == 0 {
            return Err(Error::Config("unet width and depth must be >= 1".into()));
        }
        let u = in_rep.u();
        let hid = Rep::regular(cfg.width, u);
        let cat = Rep::sum(&[&hid, &hid])?;
        let pad = if cfg.circular { Padding::Circular } else { Padding::Zero };
        let k = cfg.kernel;
        let mut enc = Vec::new();
        for i in 0..=cfg.depth {
            let src = if i == 0 { in_rep.clone() } else { hid.clone() };
            enc.push(EqConv3d::new(store, &format!("{name}.enc{i}"), src, hid.clone(), k, 1 << i, pad, true, tied, 1.0, rng)?);
        }
        let global = EqLinear::new(store, &format!("{name}.global"), hid.clone(), hid.clone(), true, tied, 1.0, rng)?;
        let mut dec = Vec::new();
        for i in (0..cfg.depth).rev() {
            dec.push(EqConv3d::new(store, &format!("{name}.dec{i}"), cat.clone(), hid.clone(), k, 1 << i, pad, true, tied, 1.0, rng)?);
        }
        let out = Rep::trivial(1, u);
        let head = EqConv3d::new(store, &format!("{name}.head"), hid.clone(), out, 1, 1, pad, true, tied, 0.5, rng)?;
        Ok(Self { cfg, in_rep, hid, enc, global, dec, head })
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let q = 1usize << self.cfg.depth;
        if dims.iter().any(|d| d % q != 0) {
            return Err(Error::ShapeMismatch(format!("grid dims {dims:?} not divisible by 2^depth = {q}")));
        }
        Ok(())
    }

    pub fn convs(&self) -> impl Iterator<Item = &EqConv3d> {
        self.enc.iter().chain(&self.dec).chain(std::iter::once(&self.head))
    }

    pub fn global_layer(&self) -> &EqLinear {
        &self.global
    }

    /// `x: [in_dim, cells]` → logits `[1, cells]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: NodeId, dims: [usize; 3]) -> Result<NodeId> {
        self.check_dims(dims)?;
        let cells: usize = dims.iter().product();
        let mut skips = Vec::new();
        let mut h = x;
        for conv in &self.enc {
            h = conv.forward(tape, store, h, dims)?;
            h = nonlinearity(tape, h, &self.hid)?;
            skips.push(h);
        }
        skips.pop();
        let ctx = tape.spatial_mean(h);
        let ctx = self.global.forward(tape, store, ctx)?;
        let ctx = nonlinearity(tape, ctx, &self.hid)?;
        h = tape.add_channel_vec(h, ctx);
        for conv in &self.dec {
            let skip = skips.pop().expect("one skip per decoder stage");
            let c = 2 * self.hid.dim();
            let cat = tape.concat_flat(&[h, skip], vec![c, cells]);
            h = conv.forward(tape, store, cat, dims)?;
            h = nonlinearity(tape, h, &self.hid)?;
        }
        self.head.forward(tape, store, h, dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_constant_logits() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(&mut store, "u", Rep::regular(1, 4), UNetConfig::default(), true, &mut rng).unwrap();
        for b in store.infos.iter().enumerate().filter(|(_, i)| i.name.ends_with(".bias")).map(|(i, _)| i).collect::<Vec<_>>() {
            for v in &mut store.values[b] {
                *v = 0.3;
            }
        }
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![0.0; 4 * 64], vec![4, 64]);
        let y = net.forward(&mut t, &store, x, [4, 4, 4]).unwrap();
        let v = t.value(y);
        assert!(v.iter().all(|a| (a - v[0]).abs() < 1e-12));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(&mut store, "u", Rep::regular(1, 4), UNetConfig::default(), true, &mut rng).unwrap();
        assert!(net.check_dims([6, 6, 6]).is_err());
    }
}
