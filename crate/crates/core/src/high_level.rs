//! Keypose prediction: voxelized observation → heatmap logits → argmax voxel center.

use std::sync::Arc;

use rand::Rng;

use crate::equinet::pointnet::PointNet;
use crate::equinet::rep::Rep;
use crate::equinet::tape::{NodeId, Tape};
use crate::equinet::unet::{UNet, UNetConfig};
use crate::equinet::{cast, uncast, ParamStore, Real};
use crate::error::{Error, Result};
use crate::group::RepSpec;
use crate::math::Vec3;
use crate::scene::Observation;
use crate::voxel::{partition, rasterize, RasterMode, VoxelGrid, VoxelGridSpec};

#[derive(Clone, Debug)]
pub enum Encoder {
    /// Per-voxel equivariant PointNet over the points in each cell.
    Stacked(PointNet),
    /// Occupancy plus mean point features per cell.
    Raster,
}

#[derive(Clone, Debug)]
pub struct HighLevelNet {
    pub spec: VoxelGridSpec,
    pub u: u32,
    pub kf: usize,
    pub encoder: Encoder,
    pub unet: UNet,
}

#[derive(Clone, Debug)]
pub struct HighLevelConfig {
    pub spec: VoxelGridSpec,
    pub u: u32,
    pub kf: usize,
    pub stacked: bool,
    pub pointnet_hidden: usize,
    pub stacked_out: RepSpec,
    pub unet: UNetConfig,
    pub tied: bool,
}

impl HighLevelNet {
    pub fn new(store: &mut ParamStore, cfg: &HighLevelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.spec.validate()?;
        let (encoder, in_rep) = if cfg.stacked {
            let pn = PointNet::new(
                store,
                "high.pointnet",
                cfg.u,
                cfg.kf,
                cfg.spec.resolution,
                cfg.pointnet_hidden,
                cfg.stacked_out,
                cfg.tied,
                rng,
            )?;
            let rep = Rep::from_spec(&cfg.stacked_out)?;
            (Encoder::Stacked(pn), rep)
        } else {
            (Encoder::Raster, Rep::trivial(1 + cfg.kf, cfg.u))
        };
        let unet = UNet::new(store, "high.unet", in_rep, cfg.unet, cfg.tied, rng)?;
        unet.check_dims(cfg.spec.dims)?;
        Ok(Self { spec: cfg.spec.clone(), u: cfg.u, kf: cfg.kf, encoder, unet })
    }

    /// Voxelized observation `[channels, cells]` on the tape.
    pub fn input_grid<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, obs: &Observation) -> Result<NodeId> {
        if obs.cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        match &self.encoder {
            Encoder::Stacked(pn) => pn.encode_partition(tape, store, &partition(&obs.cloud, &self.spec)),
            Encoder::Raster => {
                let occ = rasterize(&obs.cloud, &self.spec, RasterMode::Occupancy, self.u)?;
                let mean = rasterize(&obs.cloud, &self.spec, RasterMode::MeanFeature, self.u)?;
                let mut data = occ.data;
                data.extend_from_slice(&mean.data);
                let c = 1 + self.kf;
                Ok(tape.constant(cast(&data), vec![c, self.spec.num_cells()]))
            }
        }
    }

    /// Logits `[1, cells]`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, obs: &Observation) -> Result<NodeId> {
        let x = self.input_grid(tape, store, obs)?;
        self.unet.forward(tape, store, x, self.spec.dims)
    }

    pub fn heatmap_with<T: Real>(&self, store: &ParamStore, obs: &Observation) -> Result<Heatmap> {
        let mut tape = Tape::<T>::new();
        let y = self.logits(&mut tape, store, obs)?;
        let grid = VoxelGrid::from_data(self.spec.clone(), RepSpec::trivial(1, self.u), uncast(tape.value(y)))?;
        Ok(Heatmap { grid })
    }

    pub fn heatmap(&self, store: &ParamStore, obs: &Observation) -> Result<Heatmap> {
        self.heatmap_with::<f64>(store, obs)
    }

    /// Cross-entropy against the voxel containing `target`.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        obs: &Observation,
        target: Vec3,
    ) -> Result<NodeId> {
        let idx = make_target(&self.spec, target)?;
        let y = self.logits(tape, store, obs)?;
        Ok(tape.cross_entropy(y, idx))
    }

    pub fn stacked_encoder(&self) -> Option<&PointNet> {
        match &self.encoder {
            Encoder::Stacked(p) => Some(p),
            Encoder::Raster => None,
        }
    }

    pub fn in_rep(&self) -> Arc<Rep> {
        self.unet.in_rep.clone()
    }
}

/// One trivial channel of logits over the observation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: VoxelGrid,
}

impl Heatmap {
    pub fn logits(&self) -> &[f64] {
        &self.grid.data
    }

    /// Linear index of the max logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.grid.data.iter().enumerate() {
            if *v > self.grid.data[best] {
                best = i;
            }
        }
        best
    }

    /// Gap between the best and second-best logit.
    pub fn margin(&self) -> f64 {
        let b = self.argmax();
        let second = self
            .grid
            .data
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != b)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        self.grid.data[b] - second
    }

    pub fn softmax(&self) -> Vec<f64> {
        let mx = self.grid.data.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let e: Vec<f64> = self.grid.data.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn entropy(&self) -> f64 {
        self.softmax().iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }
}

/// Center of the highest-logit voxel.
pub fn select_keypose(hm: &Heatmap) -> Vec3 {
    let spec = &hm.grid.spec;
    spec.index_to_center(spec.unlinear(hm.argmax()))
}

pub fn make_target(spec: &VoxelGridSpec, t_star: Vec3) -> Result<usize> {
    spec.world_to_index(t_star)
        .map(|idx| spec.linear(idx))
        .ok_or(Error::TargetOutOfBounds { coord: t_star })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], 1.0, [4, 4, 4], 6).unwrap()
    }

    #[test]
    fn keypose_tie_goes_to_first_voxel() {
        let hm = Heatmap { grid: VoxelGrid::zeros(spec(), RepSpec::trivial(1, 4)).unwrap() };
        assert_eq!(select_keypose(&hm), [0.5, 0.5, 0.5]);
        let mut hm = hm;
        hm.grid.data[spec().linear([1, 2, 3])] = 1.0;
        assert_eq!(select_keypose(&hm), [1.5, 2.5, 3.5]);
    }

    #[test]
    fn targets() {
        let s = spec();
        assert_eq!(make_target(&s, [0.0, 0.0, 0.0]).unwrap(), 0);
        assert_eq!(make_target(&s, [1.5, 0.5, 0.5]).unwrap(), 1);
        assert!(matches!(make_target(&s, [5.0, 0.0, 0.0]), Err(Error::TargetOutOfBounds { .. })));
    }
}
