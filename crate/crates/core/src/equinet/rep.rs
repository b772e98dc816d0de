//! Sparse group representations used to type network features.
//!
//! A [`Rep`] stores `ρ(r^m)` for every rotation `r^m` of C_u as a sparse
//! row list. Reps are built from trivial / standard / regular blocks, direct
//! sums, and spatial grids (cell permutation tensored with a channel rep).

use std::sync::Arc;

use super::Real;
use crate::error::{Error, Result};
use crate::group::{cos_sin, RepSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Trivial,
    Standard,
    Regular,
}

type SparseRows = Vec<Vec<(usize, f64)>>;

#[derive(Clone, Debug)]
pub struct Rep {
    dim: usize,
    u: u32,
    mats: Vec<SparseRows>,
    label: String,
}

impl PartialEq for Rep {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.u == other.u && self.label == other.label
    }
}

fn block_rows(b: Block, m: u32, u: u32) -> SparseRows {
    match b {
        Block::Trivial => vec![vec![(0, 1.0)]],
        Block::Standard => {
            let (c, s) = cos_sin(m, u);
            let mut rows = vec![vec![], vec![]];
            for (j, v) in [(0, c), (1, -s)] {
                if v != 0.0 {
                    rows[0].push((j, v));
                }
            }
            for (j, v) in [(0, s), (1, c)] {
                if v != 0.0 {
                    rows[1].push((j, v));
                }
            }
            rows
        }
        Block::Regular => {
            let n = u as usize;
            let m = (m % u) as usize;
            (0..n).map(|i| vec![((i + n - m) % n, 1.0)]).collect()
        }
    }
}

impl Rep {
    pub fn from_blocks(blocks: &[Block], u: u32) -> Result<Arc<Rep>> {
        if u == 0 {
            return Err(Error::ZeroGroupOrder);
        }
        let mut dim = 0;
        let mut mats: Vec<SparseRows> = vec![Vec::new(); u as usize];
        for &b in blocks {
            for (m, mat) in mats.iter_mut().enumerate() {
                for row in block_rows(b, m as u32, u) {
                    mat.push(row.into_iter().map(|(j, v)| (j + dim, v)).collect());
                }
            }
            dim += match b {
                Block::Trivial => 1,
                Block::Standard => 2,
                Block::Regular => u as usize,
            };
        }
        let label = compress_label(blocks);
        Ok(Arc::new(Rep { dim, u, mats, label: format!("{label}/C{u}") }))
    }

    pub fn from_spec(spec: &RepSpec) -> Result<Arc<Rep>> {
        let mut blocks = vec![Block::Trivial; spec.n0];
        blocks.extend(std::iter::repeat(Block::Standard).take(spec.n1));
        blocks.extend(std::iter::repeat(Block::Regular).take(spec.nreg));
        Self::from_blocks(&blocks, spec.u)
    }

    pub fn regular(n: usize, u: u32) -> Arc<Rep> {
        Self::from_blocks(&vec![Block::Regular; n], u).expect("u >= 1")
    }

    pub fn trivial(n: usize, u: u32) -> Arc<Rep> {
        Self::from_blocks(&vec![Block::Trivial; n], u).expect("u >= 1")
    }

    pub fn sum(parts: &[&Rep]) -> Result<Arc<Rep>> {
        let u = parts.first().map(|p| p.u).ok_or_else(|| Error::InvalidArgument("empty rep sum".into()))?;
        let mut dim = 0;
        let mut mats: Vec<SparseRows> = vec![Vec::new(); u as usize];
        for p in parts {
            if p.u != u {
                return Err(Error::GroupOrderMismatch(u, p.u));
            }
            for (m, mat) in mats.iter_mut().enumerate() {
                for row in &p.mats[m] {
                    mat.push(row.iter().map(|&(j, v)| (j + dim, v)).collect());
                }
            }
            dim += p.dim;
        }
        let label = parts.iter().map(|p| p.label.as_str()).collect::<Vec<_>>().join(" + ");
        Ok(Arc::new(Rep { dim, u, mats, label }))
    }

    /// Features laid out `[channel][z][y][x]` on a square-in-xy grid; a
    /// rotation moves cells about the grid center and transforms channels.
    pub fn grid(dims: [usize; 3], channel: &Rep) -> Result<Arc<Rep>> {
        let [nx, ny, nz] = dims;
        let u = channel.u;
        let cells = nx * ny * nz;
        let mut mats: Vec<SparseRows> = Vec::with_capacity(u as usize);
        for m in 0..u {
            let quarter = if (4 * m) % u == 0 { Some((4 * m / u) % 4) } else { None };
            let perm = match quarter {
                Some(0) => (0..cells).collect::<Vec<_>>(),
                Some(q) => {
                    if nx != ny {
                        return Err(Error::InexactTransform("grid rep needs a square xy extent".into()));
                    }
                    // Destination cell j takes from g⁻¹ j.
                    let (c, s) = cos_sin((4 - q) % 4, 4);
                    let (c, s) = (c as i64, s as i64);
                    let mut p = vec![0; cells];
                    for iz in 0..nz {
                        for iy in 0..ny {
                            for ix in 0..nx {
                                let x = 2 * ix as i64 + 1 - nx as i64;
                                let y = 2 * iy as i64 + 1 - ny as i64;
                                let sx = ((c * x - s * y + nx as i64 - 1) / 2) as usize;
                                let sy = ((s * x + c * y + ny as i64 - 1) / 2) as usize;
                                p[(iz * ny + iy) * nx + ix] = (iz * ny + sy) * nx + sx;
                            }
                        }
                    }
                    p
                }
                None => {
                    return Err(Error::InexactTransform(format!("r^{m} of C{u} does not permute grid cells")));
                }
            };
            let mut rows = Vec::with_capacity(cells * channel.dim);
            for ch in 0..channel.dim {
                for dst in 0..cells {
                    let src = perm[dst];
                    rows.push(channel.mats[m as usize][ch].iter().map(|&(c2, v)| (c2 * cells + src, v)).collect());
                }
            }
            mats.push(rows);
        }
        Ok(Arc::new(Rep {
            dim: cells * channel.dim,
            u,
            mats,
            label: format!("grid{nx}x{ny}x{nz}[{}]", channel.label),
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn u(&self) -> u32 {
        self.u
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Sparse rows of `ρ(r^m)`.
    pub fn rows(&self, m: u32) -> &[Vec<(usize, f64)>] {
        &self.mats[(m % self.u) as usize]
    }

    /// True if every `ρ(g)` is a plain permutation, so pointwise maps commute with it.
    pub fn is_permutation(&self) -> bool {
        self.mats.iter().all(|mat| mat.iter().all(|r| r.len() == 1 && r[0].1 == 1.0))
    }

    pub fn apply<T: Real>(&self, m: u32, x: &[T]) -> Vec<T> {
        let rows = self.rows(m);
        rows.iter()
            .map(|r| r.iter().fold(T::zero(), |acc, &(j, v)| acc + T::from(v).unwrap() * x[j]))
            .collect()
    }

    /// Applies `ρ(r^m)` to every row of an `[n, dim]` matrix.
    pub fn apply_rows<T: Real>(&self, m: u32, x: &[T]) -> Vec<T> {
        x.chunks(self.dim).flat_map(|r| self.apply(m, r)).collect()
    }

    pub fn dense(&self, m: u32) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.dim]; self.dim];
        for (i, r) in self.rows(m).iter().enumerate() {
            for &(j, v) in r {
                out[i][j] = v;
            }
        }
        out
    }
}

fn compress_label(blocks: &[Block]) -> String {
    let mut parts: Vec<(Block, usize)> = Vec::new();
    for &b in blocks {
        match parts.last_mut() {
            Some((pb, n)) if *pb == b => *n += 1,
            _ => parts.push((b, 1)),
        }
    }
    parts
        .iter()
        .map(|(b, n)| {
            let s = match b {
                Block::Trivial => "0",
                Block::Standard => "1",
                Block::Regular => "reg",
            };
            format!("{n}x{s}")
        })
        .collect::<Vec<_>>()
        .join("+")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{rep_matrix, GroupElement};

    #[test]
    fn matches_group_rep_matrix() {
        let spec = RepSpec::new(2, 1, 2, 4).unwrap();
        let rep = Rep::from_spec(&spec).unwrap();
        for m in 0..4 {
            let g = GroupElement::rotation(m, 4).unwrap();
            assert_eq!(rep.dense(m), rep_matrix(&spec, &g).unwrap());
        }
    }

    #[test]
    fn permutation_flag() {
        assert!(Rep::regular(2, 4).is_permutation());
        assert!(!Rep::from_blocks(&[Block::Standard], 4).unwrap().is_permutation());
        let g = Rep::grid([3, 3, 2], &Rep::regular(1, 4)).unwrap();
        assert!(g.is_permutation());
    }

    #[test]
    fn grid_rep_is_homomorphism() {
        let ch = Rep::from_blocks(&[Block::Standard, Block::Regular], 4).unwrap();
        let g = Rep::grid([4, 4, 2], &ch).unwrap();
        let x: Vec<f64> = (0..g.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        for a in 0..4 {
            for b in 0..4 {
                let two = g.apply(a, &g.apply(b, &x));
                let one = g.apply(a + b, &x);
                assert_eq!(two, one);
            }
        }
    }
}
