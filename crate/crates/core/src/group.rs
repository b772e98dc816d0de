//! The symmetry group T(3) x C_u and its actions on every data type.
//!
//! A group element acts on a point by translating first and then rotating
//! the xy components about the world z axis:
//! `g p = (R(x + tx, y + ty), z + tz)`.

use std::fmt;

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::scene::{ActionChunk, GripperState, Observation, Point, PointCloud};
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupElement {
    pub t: Vec3,
    /// Rotation index: angle `2π m / u`.
    pub m: u32,
    pub u: u32,
}

impl GroupElement {
    pub fn identity(u: u32) -> Self {
        Self { t: [0.0; 3], m: 0, u }
    }

    pub fn new(t: Vec3, m: u32, u: u32) -> Result<Self> {
        if u == 0 {
            return Err(Error::ZeroGroupOrder);
        }
        Ok(Self { t, m: m % u, u })
    }

    pub fn rotation(m: u32, u: u32) -> Result<Self> {
        Self::new([0.0; 3], m, u)
    }

    pub fn translation(t: Vec3, u: u32) -> Result<Self> {
        Self::new(t, 0, u)
    }

    pub fn angle(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.m as f64 / self.u as f64
    }

    /// `(cos θ, sin θ)`, exact for multiples of a quarter turn.
    pub fn cos_sin(&self) -> (f64, f64) {
        cos_sin(self.m, self.u)
    }

    pub fn is_identity(&self) -> bool {
        self.m == 0 && self.t == [0.0; 3]
    }

    /// Number of quarter turns if the rotation is a multiple of 90°.
    pub fn quarter_turns(&self) -> Option<u32> {
        ((4 * self.m) % self.u == 0).then(|| (4 * self.m / self.u) % 4)
    }

    /// 3x3 extension `R̃` of the planar rotation.
    pub fn rot3(&self) -> Mat3 {
        let (c, s) = self.cos_sin();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    pub fn act_position(&self, p: Vec3) -> Vec3 {
        let (c, s) = self.cos_sin();
        let x = p[0] + self.t[0];
        let y = p[1] + self.t[1];
        [c * x - s * y, s * x + c * y, p[2] + self.t[2]]
    }

    /// Rotates a planar 2-vector (a ρ1 quantity).
    pub fn rotate_xy(&self, v: [f64; 2]) -> [f64; 2] {
        let (c, s) = self.cos_sin();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    /// Rotation part applied to a free 3-vector (no translation).
    pub fn rotate_vec(&self, v: Vec3) -> Vec3 {
        let r = self.rotate_xy([v[0], v[1]]);
        [r[0], r[1], v[2]]
    }

    pub fn act_point(&self, p: &Point) -> Point {
        Point { position: self.act_position(p.position), features: p.features.clone() }
    }

    pub fn act_gripper(&self, s: &GripperState) -> Result<GripperState> {
        s.validate()?;
        Ok(self.act_gripper_unchecked(s))
    }

    pub(crate) fn act_gripper_unchecked(&self, s: &GripperState) -> GripperState {
        let (c, sn) = self.cos_sin();
        let mut q = s.q;
        for j in 0..3 {
            let (a, b) = (s.q[0][j], s.q[1][j]);
            q[0][j] = c * a - sn * b;
            q[1][j] = sn * a + c * b;
        }
        GripperState { position: self.act_position(s.position), q, c: s.c }
    }

    pub fn act_chunk(&self, a: &ActionChunk) -> Result<ActionChunk> {
        let steps = a.steps.iter().map(|s| self.act_gripper(s)).collect::<Result<Vec<_>>>()?;
        Ok(ActionChunk { steps })
    }

    pub fn act_cloud(&self, p: &PointCloud) -> PointCloud {
        let mut out = p.clone();
        for pos in out.positions_mut() {
            *pos = self.act_position(*pos);
        }
        out
    }

    pub fn act_observation(&self, o: &Observation) -> Result<Observation> {
        Ok(Observation {
            cloud: self.act_cloud(&o.cloud),
            state_history: o.state_history.iter().map(|s| self.act_gripper(s)).collect::<Result<_>>()?,
            action_history: o.action_history.iter().map(|s| self.act_gripper(s)).collect::<Result<_>>()?,
        })
    }

    /// `(gV)(x) = ρ(θ) V(g⁻¹ x)` as an exact permutation of voxel cells.
    /// Rotations are about the grid's xy center; translations must be whole
    /// voxels. Cells moved out of bounds are dropped, vacated cells are zero.
    pub fn act_voxelmap(&self, v: &VoxelGrid) -> Result<VoxelGrid> {
        act_voxelmap(self, v)
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t=[{}, {}, {}], r^{} of C{})", self.t[0], self.t[1], self.t[2], self.m, self.u)
    }
}

pub fn cos_sin(m: u32, u: u32) -> (f64, f64) {
    let m = m % u;
    if (4 * m) % u == 0 {
        match 4 * m / u {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let a = 2.0 * std::f64::consts::PI * m as f64 / u as f64;
        (a.cos(), a.sin())
    }
}

/// Group law derived from the point action: `act(compose(g2, g1)) = act(g2) ∘ act(g1)`.
pub fn compose(g2: &GroupElement, g1: &GroupElement) -> Result<GroupElement> {
    if g1.u != g2.u {
        return Err(Error::GroupOrderMismatch(g2.u, g1.u));
    }
    // R2(R1(p + t1) + t2) = R2 R1 (p + t1 + R1⁻¹ t2)
    let inv1 = GroupElement { t: [0.0; 3], m: (g1.u - g1.m) % g1.u, u: g1.u };
    let back = inv1.rotate_xy([g2.t[0], g2.t[1]]);
    Ok(GroupElement {
        t: [g1.t[0] + back[0], g1.t[1] + back[1], g1.t[2] + g2.t[2]],
        m: (g1.m + g2.m) % g1.u,
        u: g1.u,
    })
}

pub fn inverse(g: &GroupElement) -> GroupElement {
    let r = g.rotate_xy([g.t[0], g.t[1]]);
    let t = [-r[0], -r[1], -g.t[2]];
    // Keep +0.0 for the identity.
    let t = t.map(|v| if v == 0.0 { 0.0 } else { v });
    GroupElement { t, m: (g.u - g.m) % g.u, u: g.u }
}

/// Multiplicities of trivial, standard and regular blocks, laid out in that
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RepSpec {
    pub n0: usize,
    pub n1: usize,
    pub nreg: usize,
    pub u: u32,
}

impl RepSpec {
    pub fn new(n0: usize, n1: usize, nreg: usize, u: u32) -> Result<Self> {
        if u == 0 {
            return Err(Error::ZeroGroupOrder);
        }
        let r = Self { n0, n1, nreg, u };
        if r.dim() == 0 {
            return Err(Error::InvalidArgument("representation has dimension 0".into()));
        }
        Ok(r)
    }

    pub fn trivial(n: usize, u: u32) -> Self {
        Self { n0: n, n1: 0, nreg: 0, u }
    }

    pub fn dim(&self) -> usize {
        self.n0 + 2 * self.n1 + self.u as usize * self.nreg
    }

    pub fn is_trivial(&self) -> bool {
        self.n1 == 0 && self.nreg == 0
    }

    /// Applies `ρ(r^m)` to a feature vector; `out` and `x` have length `dim()`.
    pub fn apply(&self, m: u32, x: &[f64], out: &mut [f64]) {
        let u = self.u as usize;
        let m = (m % self.u) as usize;
        out[..self.n0].copy_from_slice(&x[..self.n0]);
        let (c, s) = cos_sin(m as u32, self.u);
        let mut o = self.n0;
        for _ in 0..self.n1 {
            let (a, b) = (x[o], x[o + 1]);
            out[o] = c * a - s * b;
            out[o + 1] = s * a + c * b;
            o += 2;
        }
        for _ in 0..self.nreg {
            for i in 0..u {
                out[o + i] = x[o + (i + u - m) % u];
            }
            o += u;
        }
    }
}

impl fmt::Display for RepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x0+{}x1+{}xreg/C{}", self.n0, self.n1, self.nreg, self.u)
    }
}

impl std::str::FromStr for RepSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad representation string {s:?}"));
        let (blocks, u) = s.split_once("/C").ok_or_else(bad)?;
        let u: u32 = u.parse().map_err(|_| bad())?;
        let parts: Vec<&str> = blocks.split('+').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let count = |p: &str, suffix: &str| -> Result<usize> {
            p.strip_suffix(suffix).ok_or_else(bad)?.parse().map_err(|_| bad())
        };
        Ok(Self { n0: count(parts[0], "x0")?, n1: count(parts[1], "x1")?, nreg: count(parts[2], "xreg")?, u })
    }
}

/// Dense row-major `dim x dim` matrix of `ρ(g)`.
pub fn rep_matrix(rep: &RepSpec, g: &GroupElement) -> Result<Vec<Vec<f64>>> {
    if rep.u != g.u {
        return Err(Error::GroupOrderMismatch(rep.u, g.u));
    }
    let d = rep.dim();
    let mut cols = vec![vec![0.0; d]; d];
    let mut e = vec![0.0; d];
    for (j, col) in cols.iter_mut().enumerate() {
        e[j] = 1.0;
        rep.apply(g.m, &e, col);
        e[j] = 0.0;
    }
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            out[i][j] = cols[j][i];
        }
    }
    Ok(out)
}

fn voxel_shift(t: f64, res: f64) -> Result<i64> {
    let v = t / res;
    let r = v.round();
    if (v - r).abs() > 1e-9 {
        return Err(Error::InexactTransform(format!(
            "translation {t} is not a whole number of voxels ({res} m each)"
        )));
    }
    Ok(r as i64)
}

fn act_voxelmap(g: &GroupElement, v: &VoxelGrid) -> Result<VoxelGrid> {
    if v.rep.u != g.u {
        return Err(Error::GroupOrderMismatch(v.rep.u, g.u));
    }
    let [nx, ny, nz] = v.spec.dims;
    let quarter = g.quarter_turns().ok_or_else(|| {
        Error::InexactTransform(format!("rotation r^{} of C{} is not a multiple of 90°", g.m, g.u))
    })?;
    if quarter != 0 && nx != ny {
        return Err(Error::InexactTransform(format!("grid is not square in xy ({nx} x {ny})")));
    }
    let res = v.spec.resolution;
    let shift = [voxel_shift(g.t[0], res)?, voxel_shift(g.t[1], res)?, voxel_shift(g.t[2], res)?];

    // Inverse action in doubled, center-relative index coordinates
    // X = 2 ix + 1 - nx, where the rotation is an exact integer map.
    let inv = inverse(&GroupElement { t: [shift[0] as f64, shift[1] as f64, shift[2] as f64], m: g.m, u: g.u });
    let inv_t = [inv.t[0] as i64, inv.t[1] as i64, inv.t[2] as i64];
    let (c, s) = inv.cos_sin();
    let (c, s) = (c as i64, s as i64);

    let channels = v.channels();
    let cells = nx * ny * nz;
    let mut out = VoxelGrid::zeros(v.spec.clone(), v.rep)?;
    let mut src_feat = vec![0.0; channels];
    let mut dst_feat = vec![0.0; channels];
    for iz in 0..nz {
        let sz = iz as i64 + inv_t[2];
        if sz < 0 || sz >= nz as i64 {
            continue;
        }
        for iy in 0..ny {
            for ix in 0..nx {
                let x = 2 * ix as i64 + 1 - nx as i64 + 2 * inv_t[0];
                let y = 2 * iy as i64 + 1 - ny as i64 + 2 * inv_t[1];
                let sx = c * x - s * y;
                let sy = s * x + c * y;
                let sx = (sx + nx as i64 - 1) / 2;
                let sy = (sy + ny as i64 - 1) / 2;
                if sx < 0 || sy < 0 || sx >= nx as i64 || sy >= ny as i64 {
                    continue;
                }
                let src = (sz as usize * ny + sy as usize) * nx + sx as usize;
                let dst = (iz * ny + iy) * nx + ix;
                for ch in 0..channels {
                    src_feat[ch] = v.data[ch * cells + src];
                }
                v.rep.apply(g.m, &src_feat, &mut dst_feat);
                for ch in 0..channels {
                    out.data[ch * cells + dst] = dst_feat[ch];
                }
            }
        }
    }
    Ok(out)
}

/// All rotations of C_u as group elements.
pub fn rotations(u: u32) -> Vec<GroupElement> {
    (0..u).map(|m| GroupElement { t: [0.0; 3], m, u }).collect()
}

/// `R̃ q` without validation, used where `q` is already known to be a rotation.
pub fn rotate_matrix(g: &GroupElement, q: &Mat3) -> Mat3 {
    math::mat_mul(&g.rot3(), q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quarter_turn() {
        let g = GroupElement::rotation(1, 4).unwrap();
        assert_eq!(g.act_position([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0]);
        let g = GroupElement::new([1.0, 1.0, 0.0], 1, 4).unwrap();
        assert_eq!(g.act_position([1.0, 0.0, 0.5]), [-1.0, 2.0, 0.5]);
    }

    #[test]
    fn regular_generator_shifts_coordinates() {
        let rep = RepSpec::new(0, 0, 1, 4).unwrap();
        let mut out = [0.0; 4];
        rep.apply(1, &[1.0, 2.0, 3.0, 4.0], &mut out);
        assert_eq!(out, [4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn standard_quarter_turn_matrix() {
        let rep = RepSpec::new(0, 1, 0, 4).unwrap();
        let m = rep_matrix(&rep, &GroupElement::rotation(1, 4).unwrap()).unwrap();
        assert_eq!(m, vec![vec![0.0, -1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn inverse_of_pure_rotation() {
        let g = GroupElement::rotation(1, 4).unwrap();
        let i = inverse(&g);
        assert_eq!(i.m, 3);
        assert_eq!(i.t, [0.0; 3]);
        assert_eq!(inverse(&GroupElement::identity(4)), GroupElement::identity(4));
    }

    #[test]
    fn mismatched_orders_rejected() {
        let a = GroupElement::identity(4);
        let b = GroupElement::identity(8);
        assert!(matches!(compose(&a, &b), Err(Error::GroupOrderMismatch(4, 8))));
    }

    #[test]
    fn rep_string_round_trip() {
        let r = RepSpec::new(2, 1, 3, 4).unwrap();
        assert_eq!(r.to_string().parse::<RepSpec>().unwrap(), r);
    }
}
