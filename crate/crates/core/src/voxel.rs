//! Voxel grids: coordinate maps, point partitioning, rasterization and the
//! stacked-voxel encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::RepSpec;
use crate::lattice::QUANTUM;
use crate::math::Vec3;
use crate::scene::{Point, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGridSpec {
    /// World position of the min corner of voxel (0, 0, 0).
    pub origin: Vec3,
    /// Edge length of a voxel in meters.
    pub resolution: f64,
    /// Cell counts along x, y, z.
    pub dims: [usize; 3],
    pub max_points_per_voxel: usize,
}

impl VoxelGridSpec {
    pub fn new(origin: Vec3, resolution: f64, dims: [usize; 3], max_points_per_voxel: usize) -> Result<Self> {
        let s = Self { origin, resolution, dims, max_points_per_voxel };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(Error::Config(format!("voxel resolution must be > 0, got {}", self.resolution)));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("voxel dims must be >= 1, got {:?}", self.dims)));
        }
        if self.dims[0] != self.dims[1] {
            return Err(Error::Config(format!("voxel grid must be square in xy, got {:?}", self.dims)));
        }
        if self.max_points_per_voxel == 0 {
            return Err(Error::Config("max_points_per_voxel must be >= 1".into()));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("voxel origin must be finite".into()));
        }
        Ok(())
    }

    /// Grid centered on the world z axis with its floor at `z0`.
    pub fn centered(resolution: f64, dims: [usize; 3], z0: f64, max_points_per_voxel: usize) -> Result<Self> {
        let origin = [
            -resolution * dims[0] as f64 / 2.0,
            -resolution * dims[1] as f64 / 2.0,
            z0,
        ];
        Self::new(origin, resolution, dims, max_points_per_voxel)
    }

    pub fn num_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    pub fn unlinear(&self, lin: usize) -> [usize; 3] {
        let ix = lin % self.dims[0];
        let iy = (lin / self.dims[0]) % self.dims[1];
        let iz = lin / (self.dims[0] * self.dims[1]);
        [ix, iy, iz]
    }

    /// Half-open cell containing `p`, or `None` outside the grid.
    pub fn world_to_index(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.resolution).floor();
            if !(f >= 0.0 && f < self.dims[k] as f64) {
                return None;
            }
            idx[k] = f as usize;
        }
        Some(idx)
    }

    pub fn index_to_center(&self, idx: [usize; 3]) -> Vec3 {
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = self.origin[k] + self.resolution * (idx[k] as f64 + 0.5);
        }
        c
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.world_to_index(p).is_some()
    }
}

/// Dense multi-channel grid, stored `[channel][z][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: VoxelGridSpec,
    pub rep: RepSpec,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(spec: VoxelGridSpec, rep: RepSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_cells() * rep.dim();
        Ok(Self { spec, rep, data: vec![0.0; n] })
    }

    pub fn from_data(spec: VoxelGridSpec, rep: RepSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.num_cells() * rep.dim() {
            return Err(Error::ShapeMismatch(format!(
                "grid data has {} values, expected {}",
                data.len(),
                spec.num_cells() * rep.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("grid contains non-finite values".into()));
        }
        Ok(Self { spec, rep, data })
    }

    pub fn channels(&self) -> usize {
        self.rep.dim()
    }

    pub fn get(&self, ch: usize, lin: usize) -> f64 {
        self.data[ch * self.spec.num_cells() + lin]
    }

    pub fn set(&mut self, ch: usize, lin: usize, v: f64) {
        let n = self.spec.num_cells();
        self.data[ch * n + lin] = v;
    }

    pub fn max_abs_diff(&self, other: &VoxelGrid) -> f64 {
        if self.data.len() != other.data.len() {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Points falling in one voxel, after truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelPoints {
    pub index: [usize; 3],
    pub linear: usize,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointPartition {
    pub spec: VoxelGridSpec,
    pub kf: usize,
    /// Non-empty voxels in increasing linear index order.
    pub voxels: Vec<VoxelPoints>,
    pub truncated: usize,
    pub out_of_bounds: usize,
}

impl PointPartition {
    pub fn retained(&self) -> usize {
        self.voxels.iter().map(|v| v.points.len()).sum()
    }
}

const TRUNCATION_SEED: u64 = 0x5eed_0f_70c5;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Rotation- and translation-invariant signature of a point relative to its
/// voxel center: squared planar radius and height in half-quantum units, and
/// the raw feature bits.
fn signature(rel: Vec3, features: &[f64]) -> (i128, i64, Vec<u64>) {
    let h = |v: f64| (2.0 * v / QUANTUM).round() as i64;
    let (x, y) = (h(rel[0]) as i128, h(rel[1]) as i128);
    (x * x + y * y, h(rel[2]), features.iter().map(|f| f.to_bits()).collect())
}

fn signature_hash(sig: &(i128, i64, Vec<u64>)) -> u64 {
    let mut acc = mix(TRUNCATION_SEED);
    acc = mix(acc ^ sig.0 as u64);
    acc = mix(acc ^ (sig.0 >> 64) as u64);
    acc = mix(acc ^ sig.1 as u64);
    for f in &sig.2 {
        acc = mix(acc ^ f);
    }
    acc
}

/// Assigns every in-bounds point to its half-open cell. Voxels holding more
/// than `max_points_per_voxel` points keep those with the smallest seeded
/// hash of their rotation-invariant signature; points whose signature ties
/// across the cut are all dropped so the retained set never depends on
/// orientation or input order.
pub fn partition(cloud: &PointCloud, spec: &VoxelGridSpec) -> PointPartition {
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let mut out_of_bounds = 0;
    for (i, p) in cloud.positions().iter().enumerate() {
        match spec.world_to_index(*p) {
            Some(idx) => buckets.entry(spec.linear(idx)).or_default().push(i),
            None => out_of_bounds += 1,
        }
    }
    let cap = spec.max_points_per_voxel;
    let mut truncated = 0;
    let mut voxels = Vec::with_capacity(buckets.len());
    for (lin, members) in buckets {
        let index = spec.unlinear(lin);
        let center = spec.index_to_center(index);
        let mut keyed: Vec<_> = members
            .into_iter()
            .map(|i| {
                let p = cloud.positions()[i];
                let rel = crate::math::sub(p, center);
                let sig = signature(rel, cloud.feature(i));
                let pos_bits = p.map(f64::to_bits);
                (signature_hash(&sig), sig, pos_bits, i)
            })
            .collect();
        keyed.sort();
        let mut keep = keyed.len().min(cap);
        if keep < keyed.len() {
            let cut = (&keyed[keep].0, &keyed[keep].1);
            while keep > 0 && (&keyed[keep - 1].0, &keyed[keep - 1].1) == cut {
                keep -= 1;
            }
        }
        truncated += keyed.len() - keep;
        if keep == 0 {
            continue;
        }
        let points = keyed[..keep].iter().map(|k| cloud.point(k.3)).collect();
        voxels.push(VoxelPoints { index, linear: lin, points });
    }
    PointPartition { spec: spec.clone(), kf: cloud.kf(), voxels, truncated, out_of_bounds }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterMode {
    Occupancy,
    MeanFeature,
}

pub fn rasterize(cloud: &PointCloud, spec: &VoxelGridSpec, mode: RasterMode, u: u32) -> Result<VoxelGrid> {
    let part = partition(cloud, spec);
    let channels = match mode {
        RasterMode::Occupancy => 1,
        RasterMode::MeanFeature => cloud.kf(),
    };
    if channels == 0 {
        return Err(Error::FeatureWidth { header: 1, record: 0 });
    }
    let mut grid = VoxelGrid::zeros(spec.clone(), RepSpec::trivial(channels, u))?;
    for v in &part.voxels {
        match mode {
            RasterMode::Occupancy => grid.set(0, v.linear, 1.0),
            RasterMode::MeanFeature => {
                for ch in 0..channels {
                    let sum: f64 = v.points.iter().map(|p| p.features[ch]).sum();
                    grid.set(ch, v.linear, sum / v.points.len() as f64);
                }
            }
        }
    }
    Ok(grid)
}

/// Anything mapping a voxel's point set (positions relative to the voxel
/// center, plus features) to a fixed-width typed feature vector.
pub trait PointSetEncoder {
    fn out_rep(&self) -> RepSpec;
    fn encode_set(&self, rel_positions: &[Vec3], features: &[&[f64]]) -> Vec<f64>;
}

/// Stacked-voxel grid: each non-empty voxel holds the encoder's output on
/// its point set, empty voxels are zero.
pub fn encode_stacked<E: PointSetEncoder + ?Sized>(
    part: &PointPartition,
    encoder: &E,
    declared: &RepSpec,
) -> Result<VoxelGrid> {
    let rep = encoder.out_rep();
    if rep != *declared {
        return Err(Error::TypeMismatch(format!("encoder emits {rep}, grid declares {declared}")));
    }
    let mut grid = VoxelGrid::zeros(part.spec.clone(), rep)?;
    for v in &part.voxels {
        let center = part.spec.index_to_center(v.index);
        let rel: Vec<Vec3> = v.points.iter().map(|p| crate::math::sub(p.position, center)).collect();
        let feats: Vec<&[f64]> = v.points.iter().map(|p| p.features.as_slice()).collect();
        let out = encoder.encode_set(&rel, &feats);
        for (ch, x) in out.into_iter().enumerate() {
            grid.set(ch, v.linear, x);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], 0.5, [4, 4, 4], 6).unwrap()
    }

    #[test]
    fn index_corners() {
        let s = spec();
        assert_eq!(s.world_to_index([0.0; 3]), Some([0, 0, 0]));
        assert_eq!(s.world_to_index([1.75, 1.75, 1.75]), Some([3, 3, 3]));
        assert_eq!(s.world_to_index([2.0, 0.0, 0.0]), None);
        assert_eq!(s.world_to_index([-1e-12, 0.0, 0.0]), None);
    }

    #[test]
    fn linear_round_trip() {
        let s = VoxelGridSpec::new([0.0; 3], 1.0, [3, 3, 5], 1).unwrap();
        for lin in 0..s.num_cells() {
            assert_eq!(s.linear(s.unlinear(lin)), lin);
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(VoxelGridSpec::new([0.0; 3], 1.0, [3, 4, 5], 1).is_err());
        assert!(VoxelGridSpec::new([0.0; 3], 0.0, [4, 4, 4], 1).is_err());
    }

    #[test]
    fn empty_and_single() {
        let s = spec();
        let p = partition(&PointCloud::new(3), &s);
        assert!(p.voxels.is_empty());
        let mut c = PointCloud::new(3);
        c.push([0.6, 0.1, 1.2], &[1.0, 0.0, 0.0]).unwrap();
        let p = partition(&c, &s);
        assert_eq!(p.voxels.len(), 1);
        assert_eq!(p.voxels[0].index, [1, 0, 2]);
        let g = rasterize(&c, &s, RasterMode::MeanFeature, 4).unwrap();
        assert_eq!(g.get(0, s.linear([1, 0, 2])), 1.0);
        assert_eq!(g.data.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn truncation_caps_lists() {
        let s = VoxelGridSpec::new([0.0; 3], 1.0, [1, 1, 1], 3).unwrap();
        let mut c = PointCloud::new(1);
        for i in 0..10 {
            c.push([0.05 * i as f64 + 0.01, 0.3, 0.2], &[i as f64]).unwrap();
        }
        let p = partition(&c, &s);
        assert_eq!(p.voxels[0].points.len(), 3);
        assert_eq!(p.truncated, 7);
    }
}
