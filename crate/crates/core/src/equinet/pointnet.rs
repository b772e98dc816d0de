//! Equivariant per-voxel point-set encoder.
//!
//! Each point enters as its voxel-relative xy lifted to a regular field
//! (inner products with the `u` rotated unit vectors), its relative height
//! and its raw features. A shared stack of equivariant linear layers is
//! followed by a channel-wise max over the set.

use std::sync::Arc;

use rand::Rng;

use super::layers::{nonlinearity, EqLinear};
use super::params::ParamStore;
use super::rep::{Block, Rep};
use super::tape::{NodeId, Tape};
use super::{cast, uncast, Real};
use crate::error::{Error, Result};
use crate::group::{cos_sin, RepSpec};
use crate::math::Vec3;
use crate::voxel::{PointPartition, PointSetEncoder};

#[derive(Clone, Debug)]
pub struct PointNet {
    pub u: u32,
    pub kf: usize,
    /// Relative positions are divided by this (half a voxel edge).
    pub length_scale: f64,
    pub in_rep: Arc<Rep>,
    pub out_spec: RepSpec,
    layers: Vec<EqLinear>,
}

impl PointNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        u: u32,
        kf: usize,
        voxel_size: f64,
        hidden: usize,
        out_spec: RepSpec,
        tied: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if out_spec.n1 != 0 {
            return Err(Error::TypeMismatch("max-pooled encoder output must be regular/trivial".into()));
        }
        if out_spec.u != u {
            return Err(Error::GroupOrderMismatch(out_spec.u, u));
        }
        let mut blocks = vec![Block::Regular];
        blocks.extend(std::iter::repeat(Block::Trivial).take(1 + kf));
        let in_rep = Rep::from_blocks(&blocks, u)?;
        let hid = Rep::regular(hidden, u);
        let out = Rep::from_spec(&out_spec)?;
        let layers = vec![
            EqLinear::new(store, &format!("{name}.l0"), in_rep.clone(), hid.clone(), true, tied, 1.0, rng)?,
            EqLinear::new(store, &format!("{name}.l1"), hid.clone(), hid.clone(), true, tied, 1.0, rng)?,
            EqLinear::new(store, &format!("{name}.l2"), hid, out, true, tied, 1.0, rng)?,
        ];
        Ok(Self { u, kf, length_scale: voxel_size / 2.0, in_rep, out_spec, layers })
    }

    pub fn out_dim(&self) -> usize {
        self.out_spec.dim()
    }

    pub fn layers(&self) -> &[EqLinear] {
        &self.layers
    }

    fn push_point_row(&self, rel: Vec3, feats: &[f64], row: &mut Vec<f64>) {
        let (x, y) = (rel[0] / self.length_scale, rel[1] / self.length_scale);
        for i in 0..self.u {
            let (c, s) = cos_sin(i, self.u);
            row.push(c * x + s * y);
        }
        row.push(rel[2] / self.length_scale);
        row.extend_from_slice(feats);
    }

    /// Shared per-point stack on `[n, in]` rows.
    fn point_features<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = nonlinearity(tape, h, &l.out_rep)?;
            }
        }
        Ok(h)
    }

    /// Stacked-voxel grid `[out_dim, cells]` on the tape.
    pub fn encode_partition<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        part: &PointPartition,
    ) -> Result<NodeId> {
        if part.kf != self.kf {
            return Err(Error::FeatureWidth { header: self.kf, record: part.kf });
        }
        let cells = part.spec.num_cells();
        let c = self.out_dim();
        if part.voxels.is_empty() {
            return Ok(tape.constant(vec![T::zero(); c * cells], vec![c, cells]));
        }
        let width = self.in_rep.dim();
        let mut rows = Vec::with_capacity(part.retained() * width);
        let mut lens = Vec::with_capacity(part.voxels.len());
        let mut idx = Vec::with_capacity(part.voxels.len());
        for v in &part.voxels {
            let center = part.spec.index_to_center(v.index);
            for p in &v.points {
                self.push_point_row(crate::math::sub(p.position, center), &p.features, &mut rows);
            }
            lens.push(v.points.len());
            idx.push(v.linear);
        }
        let n = rows.len() / width;
        let x = tape.constant(cast(&rows), vec![n, width]);
        let h = self.point_features(tape, store, x)?;
        let pooled = tape.segment_max(h, &lens);
        Ok(tape.scatter_rows(pooled, &idx, cells))
    }

    /// Encoder output for one point set (zeros if empty).
    pub fn encode_set_with<T: Real>(&self, store: &ParamStore, rel: &[Vec3], feats: &[&[f64]]) -> Result<Vec<f64>> {
        if rel.is_empty() {
            return Ok(vec![0.0; self.out_dim()]);
        }
        let width = self.in_rep.dim();
        let mut rows = Vec::with_capacity(rel.len() * width);
        for (r, f) in rel.iter().zip(feats) {
            if f.len() != self.kf {
                return Err(Error::FeatureWidth { header: self.kf, record: f.len() });
            }
            self.push_point_row(*r, f, &mut rows);
        }
        let mut tape = Tape::<T>::new();
        let x = tape.constant(cast(&rows), vec![rel.len(), width]);
        let h = self.point_features(&mut tape, store, x)?;
        let pooled = tape.segment_max(h, &[rel.len()]);
        Ok(uncast(tape.value(pooled)))
    }
}

/// A [`PointNet`] bound to its parameters, evaluated at precision `T`.
pub struct BoundPointNet<'a, T> {
    pub net: &'a PointNet,
    pub store: &'a ParamStore,
    _t: std::marker::PhantomData<T>,
}

impl<'a, T> BoundPointNet<'a, T> {
    pub fn new(net: &'a PointNet, store: &'a ParamStore) -> Self {
        Self { net, store, _t: std::marker::PhantomData }
    }
}

impl<T: Real> PointSetEncoder for BoundPointNet<'_, T> {
    fn out_rep(&self) -> RepSpec {
        self.net.out_spec
    }

    fn encode_set(&self, rel_positions: &[Vec3], features: &[&[f64]]) -> Vec<f64> {
        self.net
            .encode_set_with::<T>(self.store, rel_positions, features)
            .expect("feature width checked by the partition")
    }
}
