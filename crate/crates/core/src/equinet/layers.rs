//! Equivariant linear and convolution layers.
//!
//! Raw parameters are unconstrained; the effective weight is their group
//! average `W_eq = (1/u) Σ_g ρ_out(g) W ρ_in(g)⁻¹` (with the kernel's
//! spatial offsets rotated for convolutions), applied as a fixed sparse
//! projection on the tape. Untied layers skip the projection.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::ParamStore;
use super::rep::Rep;
use super::tape::{ConvGeom, NodeId, Padding, Projection, Tape};
use super::Real;
use crate::error::{Error, Result};
use crate::group::cos_sin;

fn check_u(a: &Rep, b: &Rep) -> Result<u32> {
    if a.u() != b.u() {
        return Err(Error::GroupOrderMismatch(a.u(), b.u()));
    }
    Ok(a.u())
}

/// Projection onto weights `[out, in, offsets]` commuting with the reps.
/// `offset_perm[m][o]` is the kernel offset `R_m⁻¹ o`.
fn weight_projection(out_rep: &Rep, in_rep: &Rep, offset_perm: &[Vec<usize>]) -> Result<Projection> {
    let u = check_u(out_rep, in_rep)?;
    let (no, ni) = (out_rep.dim(), in_rep.dim());
    let kk = offset_perm[0].len();
    let inv_u = 1.0 / u as f64;
    let mut trip = Vec::new();
    for m in 0..u {
        let ro = out_rep.rows(m);
        let ri = in_rep.rows(m);
        let perm = &offset_perm[m as usize];
        for (co, orow) in ro.iter().enumerate() {
            for (ci, irow) in ri.iter().enumerate() {
                for &(a, va) in orow {
                    for &(b, vb) in irow {
                        let base_dst = (co * ni + ci) * kk;
                        let base_src = (a * ni + b) * kk;
                        for (o, &src_o) in perm.iter().enumerate() {
                            trip.push((base_dst + o, base_src + src_o, va * vb * inv_u));
                        }
                    }
                }
            }
        }
    }
    Ok(Projection::from_triplets(no * ni * kk, no * ni * kk, trip))
}

fn bias_projection(out_rep: &Rep) -> Projection {
    let u = out_rep.u();
    let mut trip = Vec::new();
    for m in 0..u {
        for (co, row) in out_rep.rows(m).iter().enumerate() {
            for &(a, v) in row {
                trip.push((co, a, v / u as f64));
            }
        }
    }
    Projection::from_triplets(out_rep.dim(), out_rep.dim(), trip)
}

/// Raw values scaled so the projected weights have the requested std.
fn init_raw(n: usize, proj: Option<&Projection>, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let eff = match proj {
        Some(p) => p.apply(&raw),
        None => raw.clone(),
    };
    let nz: Vec<f64> = eff.iter().copied().filter(|v| *v != 0.0).collect();
    if nz.is_empty() {
        return raw;
    }
    let cur = (nz.iter().map(|v| v * v).sum::<f64>() / nz.len() as f64).sqrt();
    let s = std / cur;
    for v in &mut raw {
        *v *= s;
    }
    raw
}

#[derive(Clone, Debug)]
pub struct EqLinear {
    pub in_rep: Arc<Rep>,
    pub out_rep: Arc<Rep>,
    pub w: usize,
    pub b: Option<usize>,
    wproj: Option<Arc<Projection>>,
    bproj: Option<Arc<Projection>>,
}

impl EqLinear {
    /// `gain` scales the He-style init std `sqrt(2 / fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_rep: Arc<Rep>,
        out_rep: Arc<Rep>,
        bias: bool,
        tied: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_u(&in_rep, &out_rep)?;
        let (no, ni) = (out_rep.dim(), in_rep.dim());
        let identity = vec![vec![0usize]; in_rep.u() as usize];
        let wproj = if tied { Some(Arc::new(weight_projection(&out_rep, &in_rep, &identity)?)) } else { None };
        let bproj = if tied && bias { Some(Arc::new(bias_projection(&out_rep))) } else { None };
        let std = gain * (2.0 / ni as f64).sqrt();
        let raw = init_raw(no * ni, wproj.as_deref(), std, rng);
        let label = format!("{} -> {}{}", in_rep.label(), out_rep.label(), if tied { "" } else { " (untied)" });
        let w = store.add(&format!("{name}.weight"), vec![no, ni], raw, label.clone());
        let b = bias.then(|| store.add(&format!("{name}.bias"), vec![no], vec![0.0; no], out_rep.label().to_string()));
        Ok(Self { in_rep, out_rep, w, b, wproj, bproj })
    }

    pub fn is_tied(&self) -> bool {
        self.wproj.is_some()
    }

    /// Drops the symmetry projection so the raw weights act directly.
    /// Used by the audit's mutation test.
    pub fn untie(&mut self) {
        self.wproj = None;
        self.bproj = None;
    }

    pub fn effective_weight(&self, store: &ParamStore) -> Vec<f64> {
        match &self.wproj {
            Some(p) => p.apply(&store.values[self.w]),
            None => store.values[self.w].clone(),
        }
    }

    pub fn effective_bias(&self, store: &ParamStore) -> Option<Vec<f64>> {
        let b = self.b?;
        Some(match &self.bproj {
            Some(p) => p.apply(&store.values[b]),
            None => store.values[b].clone(),
        })
    }

    /// `x: [n, in_dim]` → `[n, out_dim]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_rep.dim() {
            return Err(Error::TypeMismatch(format!(
                "linear expects [n, {}] ({}), got {:?}",
                self.in_rep.dim(),
                self.in_rep.label(),
                shape
            )));
        }
        let (no, ni) = (self.out_rep.dim(), self.in_rep.dim());
        let raw = store.load(tape, self.w);
        let w = match &self.wproj {
            Some(p) => tape.project(raw, p.clone(), vec![no, ni]),
            None => raw,
        };
        let mut y = tape.matmul_nt(x, w);
        if let Some(b) = self.b {
            let raw_b = store.load(tape, b);
            let bb = match &self.bproj {
                Some(p) => tape.project(raw_b, p.clone(), vec![no]),
                None => raw_b,
            };
            y = tape.add_row_bias(y, bb);
        }
        Ok(y)
    }
}

/// SiLU on features whose rep acts by permutation (regular / trivial).
pub fn nonlinearity<T: Real>(tape: &mut Tape<T>, x: NodeId, rep: &Rep) -> Result<NodeId> {
    if !rep.is_permutation() {
        return Err(Error::TypeMismatch(format!(
            "pointwise nonlinearity on non-permutation rep {} (lift to regular first)",
            rep.label()
        )));
    }
    Ok(tape.silu(x))
}

#[derive(Clone, Debug)]
pub struct EqConv3d {
    pub in_rep: Arc<Rep>,
    pub out_rep: Arc<Rep>,
    pub k: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub w: usize,
    pub b: Option<usize>,
    wproj: Option<Arc<Projection>>,
    bproj: Option<Arc<Projection>>,
}

/// `perm[m][o]` = index of the kernel offset `R_m⁻¹ o` for a cubic kernel.
fn kernel_rotation(k: usize, u: u32) -> Result<Vec<Vec<usize>>> {
    let h = (k / 2) as i64;
    let idx = |x: i64, y: i64, z: i64| (((z + h) * k as i64 + (y + h)) * k as i64 + (x + h)) as usize;
    let mut out = Vec::with_capacity(u as usize);
    for m in 0..u {
        if (4 * m) % u != 0 {
            return Err(Error::InexactTransform(format!("C{u} rotations do not map kernel taps onto taps")));
        }
        let (c, s) = cos_sin(u - m, u);
        let (c, s) = (c as i64, s as i64);
        let mut p = vec![0; k * k * k];
        for z in -h..=h {
            for y in -h..=h {
                for x in -h..=h {
                    p[idx(x, y, z)] = idx(c * x - s * y, s * x + c * y, z);
                }
            }
        }
        out.push(p);
    }
    Ok(out)
}

impl EqConv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_rep: Arc<Rep>,
        out_rep: Arc<Rep>,
        k: usize,
        dilation: usize,
        padding: Padding,
        bias: bool,
        tied: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be >= 1".into()));
        }
        let u = check_u(&in_rep, &out_rep)?;
        let (no, ni, kk) = (out_rep.dim(), in_rep.dim(), k * k * k);
        let wproj = if tied {
            Some(Arc::new(weight_projection(&out_rep, &in_rep, &kernel_rotation(k, u)?)?))
        } else {
            None
        };
        let bproj = if tied && bias { Some(Arc::new(bias_projection(&out_rep))) } else { None };
        let std = gain * (2.0 / (ni * kk) as f64).sqrt();
        let raw = init_raw(no * ni * kk, wproj.as_deref(), std, rng);
        let label = format!(
            "{} -> {} k{k} d{dilation}{}",
            in_rep.label(),
            out_rep.label(),
            if tied { "" } else { " (untied)" }
        );
        let w = store.add(&format!("{name}.weight"), vec![no, ni, k, k, k], raw, label);
        let b = bias.then(|| store.add(&format!("{name}.bias"), vec![no], vec![0.0; no], out_rep.label().to_string()));
        Ok(Self { in_rep, out_rep, k, dilation, padding, w, b, wproj, bproj })
    }

    pub fn effective_weight(&self, store: &ParamStore) -> Vec<f64> {
        match &self.wproj {
            Some(p) => p.apply(&store.values[self.w]),
            None => store.values[self.w].clone(),
        }
    }

    /// `x: [cin, cells]` over a grid with spatial `dims` → `[cout, cells]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: NodeId, dims: [usize; 3]) -> Result<NodeId> {
        let cells = dims.iter().product::<usize>();
        if tape.value(x).len() != self.in_rep.dim() * cells {
            return Err(Error::TypeMismatch(format!(
                "conv expects {} channels ({}) over {:?}, got {} values",
                self.in_rep.dim(),
                self.in_rep.label(),
                dims,
                tape.value(x).len()
            )));
        }
        let (no, ni) = (self.out_rep.dim(), self.in_rep.dim());
        let raw = store.load(tape, self.w);
        let w = match &self.wproj {
            Some(p) => tape.project(raw, p.clone(), vec![no, ni, self.k, self.k, self.k]),
            None => raw,
        };
        let geom = ConvGeom { cin: ni, cout: no, dims, k: self.k, dilation: self.dilation, padding: self.padding };
        let mut y = tape.conv3d(x, w, geom);
        if let Some(b) = self.b {
            let raw_b = store.load(tape, b);
            let bb = match &self.bproj {
                Some(p) => tape.project(raw_b, p.clone(), vec![no]),
                None => raw_b,
            };
            y = tape.add_channel_vec(y, bb);
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equinet::rep::Block;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_is_idempotent() {
        let a = Rep::from_blocks(&[Block::Trivial, Block::Standard, Block::Regular], 4).unwrap();
        let b = Rep::from_blocks(&[Block::Regular, Block::Standard], 4).unwrap();
        let p = weight_projection(&b, &a, &vec![vec![0]; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..p.n_in).map(|_| rng.sample(StandardNormal)).collect();
        let once = p.apply(&x);
        let twice = p.apply(&once);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trivial_bias_survives_standard_bias_vanishes() {
        let r = Rep::from_blocks(&[Block::Trivial, Block::Standard, Block::Regular], 4).unwrap();
        let p = bias_projection(&r);
        let out = p.apply(&[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 6.0]);
        assert_eq!(out, vec![1.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut s = ParamStore::new();
        let r = Rep::regular(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = EqConv3d::new(&mut s, "c", r.clone(), r, 2, 1, Padding::Circular, true, true, 1.0, &mut rng);
        assert!(e.is_err());
    }

    #[test]
    fn nonlinearity_rejects_standard() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![0.0, 0.0], vec![1, 2]);
        let r = Rep::from_blocks(&[Block::Standard], 4).unwrap();
        assert!(nonlinearity(&mut t, x, &r).is_err());
        let r = Rep::trivial(2, 4);
        let y = nonlinearity(&mut t, x, &r).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
    }
}
