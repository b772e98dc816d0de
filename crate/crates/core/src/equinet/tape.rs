//! Reverse-mode differentiation over flat tensors.
//!
//! Every op appends a node holding its value and a closure that maps the
//! node's output gradient to input gradients. Nodes are topologically
//! ordered by construction, so `backward` is a single reverse sweep.

use std::sync::Arc;

use super::Real;
use crate::error::{Error, Result};

pub type NodeId = usize;

type BackFn<T> = Box<dyn Fn(&[Vec<T>], &[T], &mut Grads<T>)>;

struct Node<T> {
    shape: Vec<usize>,
    back: Option<BackFn<T>>,
}

/// Gradient buffers, allocated lazily per node.
pub struct Grads<T> {
    g: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Real> Grads<T> {
    pub fn acc(&mut self, id: NodeId) -> &mut [T] {
        let n = self.sizes[id];
        self.g[id].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.g[id].as_deref()
    }
}

pub struct Tape<T> {
    values: Vec<Vec<T>>,
    nodes: Vec<Node<T>>,
    params: Vec<(NodeId, usize)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Sparse linear map `y = P x`, stored with its transpose for the backward pass.
#[derive(Clone, Debug)]
pub struct Projection {
    pub n_in: usize,
    pub n_out: usize,
    fwd: Csr,
    bwd: Csr,
}

#[derive(Clone, Debug)]
struct Csr {
    indptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn from_triplets(n_rows: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; n_rows + 1];
        let mut idx = Vec::with_capacity(t.len());
        let mut val: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *val.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            idx.push(c);
            val.push(v);
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Self { indptr, idx, val }
    }

    fn apply<T: Real>(&self, x: &[T], y: &mut [T], accumulate: bool) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut s = T::zero();
            for k in self.indptr[r]..self.indptr[r + 1] {
                s += T::from(self.val[k]).unwrap() * x[self.idx[k]];
            }
            if accumulate {
                *yr += s;
            } else {
                *yr = s;
            }
        }
    }
}

impl Projection {
    /// Builds from `(out, in, value)` triplets; duplicates are summed and
    /// entries that cancel below 1e-14 are dropped.
    pub fn from_triplets(n_in: usize, n_out: usize, t: Vec<(usize, usize, f64)>) -> Self {
        let merged = Csr::from_triplets(n_out, t);
        let mut trip = Vec::new();
        for r in 0..n_out {
            for k in merged.indptr[r]..merged.indptr[r + 1] {
                if merged.val[k].abs() > 1e-14 {
                    trip.push((r, merged.idx[k], merged.val[k]));
                }
            }
        }
        let fwd = Csr::from_triplets(n_out, trip.clone());
        let bwd = Csr::from_triplets(n_in, trip.into_iter().map(|(r, c, v)| (c, r, v)).collect());
        Self { n_in, n_out, fwd, bwd }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn apply<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n_out];
        self.fwd.apply(x, &mut y, false);
        y
    }

    pub fn nnz(&self) -> usize {
        self.fwd.val.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Circular,
}

/// One contiguous run of a shifted axis: `dst[d..d+len] <- src[s..s+len]`.
type Run = (usize, usize, usize);

fn axis_runs(len: usize, shift: i64, pad: Padding) -> Vec<Run> {
    let l = len as i64;
    match pad {
        Padding::Zero => {
            let d0 = (-shift).max(0);
            let d1 = (l - shift).min(l);
            if d1 <= d0 {
                vec![]
            } else {
                vec![(d0 as usize, (d0 + shift) as usize, (d1 - d0) as usize)]
            }
        }
        Padding::Circular => {
            let s = shift.rem_euclid(l);
            if s == 0 {
                vec![(0, 0, len)]
            } else {
                vec![(0, s as usize, (l - s) as usize), ((l - s) as usize, 0, s as usize)]
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    /// Spatial extent `[x, y, z]`.
    pub dims: [usize; 3],
    /// Cubic kernel edge (odd).
    pub k: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvGeom {
    fn cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn offsets(&self) -> Vec<(usize, [Vec<Run>; 3])> {
        let h = (self.k / 2) as i64;
        let d = self.dilation as i64;
        let mut out = Vec::with_capacity(self.k.pow(3));
        let mut o = 0;
        for oz in 0..self.k as i64 {
            for oy in 0..self.k as i64 {
                for ox in 0..self.k as i64 {
                    out.push((
                        o,
                        [
                            axis_runs(self.dims[0], (ox - h) * d, self.padding),
                            axis_runs(self.dims[1], (oy - h) * d, self.padding),
                            axis_runs(self.dims[2], (oz - h) * d, self.padding),
                        ],
                    ));
                    o += 1;
                }
            }
        }
        out
    }
}

/// Visits every `(dst_row_start, src_row_start, len)` x-run of one kernel offset.
fn for_each_run(dims: [usize; 3], runs: &[Vec<Run>; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, _] = dims;
    for &(dz, sz, lz) in &runs[2] {
        for z in 0..lz {
            for &(dy, sy, ly) in &runs[1] {
                for y in 0..ly {
                    let drow = ((dz + z) * ny + dy + y) * nx;
                    let srow = ((sz + z) * ny + sy + y) * nx;
                    for &(dx, sx, lx) in &runs[0] {
                        f(drow + dx, srow + sx, lx);
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, back: Option<BackFn<T>>) -> NodeId {
        debug_assert_eq!(value.len(), numel(&shape));
        self.values.push(value);
        self.nodes.push(Node { shape, back });
        self.values.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.values[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Vec<T>, shape: Vec<usize>) -> NodeId {
        self.push(value, shape, None)
    }

    /// Leaf whose gradient is reported back under parameter index `pid`.
    pub fn param(&mut self, pid: usize, value: Vec<T>, shape: Vec<usize>) -> NodeId {
        if let Some(&(id, _)) = self.params.iter().find(|(_, p)| *p == pid) {
            return id;
        }
        let id = self.push(value, shape, None);
        self.params.push((id, pid));
        id
    }

    pub fn params(&self) -> &[(NodeId, usize)] {
        &self.params
    }

    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        if self.values[loss].len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        let mut grads = Grads { g: vec![None; self.nodes.len()], sizes: self.values.iter().map(Vec::len).collect() };
        grads.g[loss] = Some(vec![T::one()]);
        for i in (0..=loss).rev() {
            let Some(g) = grads.g[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(&self.values, &g, &mut grads);
            }
            grads.g[i] = Some(g);
        }
        Ok(grads)
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a].len(), self.values[b].len(), "add: size mismatch");
        let v = self.values[a].iter().zip(&self.values[b]).map(|(x, y)| *x + *y).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(
            v,
            shape,
            Some(Box::new(move |_, g, gr| {
                for (d, s) in gr.acc(a).iter_mut().zip(g) {
                    *d += *s;
                }
                for (d, s) in gr.acc(b).iter_mut().zip(g) {
                    *d += *s;
                }
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let st = T::from(s).unwrap();
        let v = self.values[a].iter().map(|x| *x * st).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(
            v,
            shape,
            Some(Box::new(move |_, g, gr| {
                for (d, x) in gr.acc(a).iter_mut().zip(g) {
                    *d += *x * st;
                }
            })),
        )
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].iter().map(|&x| x / (T::one() + (-x).exp())).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(
            v,
            shape,
            Some(Box::new(move |vals, g, gr| {
                let x = &vals[a];
                let d = gr.acc(a);
                for i in 0..g.len() {
                    let s = T::one() / (T::one() + (-x[i]).exp());
                    d[i] += g[i] * s * (T::one() + x[i] * (T::one() - s));
                }
            })),
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].iter().fold(T::zero(), |s, x| s + *x);
        self.push(
            vec![v],
            vec![1],
            Some(Box::new(move |_, g, gr| {
                for d in gr.acc(a).iter_mut() {
                    *d += g[0];
                }
            })),
        )
    }

    /// Sum of scalar nodes times `weight`.
    pub fn weighted_sum(&mut self, items: &[NodeId], weight: f64) -> NodeId {
        let w = T::from(weight).unwrap();
        let v = items.iter().fold(T::zero(), |s, &i| s + self.values[i][0]) * w;
        let items = items.to_vec();
        self.push(
            vec![v],
            vec![1],
            Some(Box::new(move |_, g, gr| {
                for &i in &items {
                    gr.acc(i)[0] += g[0] * w;
                }
            })),
        )
    }

    /// Sum over rows of `‖a_r − target_r‖²`, divided by the row count.
    pub fn mean_row_sq_err(&mut self, a: NodeId, target: Vec<T>) -> NodeId {
        let rows = self.nodes[a].shape[0] as f64;
        assert_eq!(self.values[a].len(), target.len());
        let inv = T::from(1.0 / rows).unwrap();
        let s = self.values[a].iter().zip(&target).fold(T::zero(), |s, (x, t)| s + (*x - *t) * (*x - *t));
        self.push(
            vec![s * inv],
            vec![1],
            Some(Box::new(move |vals, g, gr| {
                let two = T::from(2.0).unwrap();
                let x = &vals[a];
                let d = gr.acc(a);
                for i in 0..x.len() {
                    d[i] += g[0] * two * inv * (x[i] - target[i]);
                }
            })),
        )
    }

    /// `Σ_r w_r ‖a_r − target_r‖²` divided by the row count.
    pub fn weighted_row_sq_err(&mut self, a: NodeId, target: Vec<T>, weights: &[f64]) -> NodeId {
        let rows = self.nodes[a].shape[0];
        assert_eq!(self.values[a].len(), target.len());
        assert_eq!(weights.len(), rows, "one weight per row");
        let cols = target.len() / rows.max(1);
        let inv = 1.0 / rows as f64;
        let w: Vec<T> = weights.iter().map(|v| T::from(v * inv).unwrap()).collect();
        let x = &self.values[a];
        let mut s = T::zero();
        for r in 0..rows {
            let e = (r * cols..(r + 1) * cols).fold(T::zero(), |s, i| s + (x[i] - target[i]) * (x[i] - target[i]));
            s = s + w[r] * e;
        }
        self.push(
            vec![s],
            vec![1],
            Some(Box::new(move |vals, g, gr| {
                let two = T::from(2.0).unwrap();
                let x = &vals[a];
                let d = gr.acc(a);
                for i in 0..x.len() {
                    d[i] += g[0] * two * w[i / cols] * (x[i] - target[i]);
                }
            })),
        )
    }

    // ----- dense layers on [n, c] row-major matrices -----

    /// `y = x wᵀ` for `x: [n, i]`, `w: [o, i]`.
    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (n, i) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        let (o, i2) = (self.nodes[w].shape[0], self.nodes[w].shape[1]);
        assert_eq!(i, i2, "matmul_nt: inner dims {i} vs {i2}");
        let xv = &self.values[x];
        let wv = &self.values[w];
        let mut y = vec![T::zero(); n * o];
        for r in 0..n {
            let xr = &xv[r * i..(r + 1) * i];
            for c in 0..o {
                let wr = &wv[c * i..(c + 1) * i];
                y[r * o + c] = dot(xr, wr);
            }
        }
        self.push(
            y,
            vec![n, o],
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x];
                let wv = &vals[w];
                {
                    let dx = gr.acc(x);
                    for r in 0..n {
                        let dxr = &mut dx[r * i..(r + 1) * i];
                        for c in 0..o {
                            axpy(g[r * o + c], &wv[c * i..(c + 1) * i], dxr);
                        }
                    }
                }
                let dw = gr.acc(w);
                for r in 0..n {
                    let xr = &xv[r * i..(r + 1) * i];
                    for c in 0..o {
                        axpy(g[r * o + c], xr, &mut dw[c * i..(c + 1) * i]);
                    }
                }
            })),
        )
    }

    /// Adds `b: [c]` to every row of `x: [n, c]`.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let c = self.values[b].len();
        assert_eq!(self.nodes[x].shape[1], c);
        let bv = self.values[b].clone();
        let v = self.values[x].chunks(c).flat_map(|r| r.iter().zip(&bv).map(|(a, b)| *a + *b)).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(
            v,
            shape,
            Some(Box::new(move |_, g, gr| {
                for (d, s) in gr.acc(x).iter_mut().zip(g) {
                    *d += *s;
                }
                let db = gr.acc(b);
                for r in g.chunks(c) {
                    for (d, s) in db.iter_mut().zip(r) {
                        *d += *s;
                    }
                }
            })),
        )
    }

    /// Column concatenation of `[n, a_k]` matrices.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.nodes[parts[0]].shape[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].shape[1]).collect();
        assert!(parts.iter().all(|&p| self.nodes[p].shape[0] == n), "concat_cols: row mismatch");
        let total: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(n * total);
        for r in 0..n {
            for (k, &p) in parts.iter().enumerate() {
                v.extend_from_slice(&self.values[p][r * widths[k]..(r + 1) * widths[k]]);
            }
        }
        let parts = parts.to_vec();
        self.push(
            v,
            vec![n, total],
            Some(Box::new(move |_, g, gr| {
                let mut off = 0;
                for (k, &p) in parts.iter().enumerate() {
                    let w = widths[k];
                    let d = gr.acc(p);
                    for r in 0..n {
                        for j in 0..w {
                            d[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            })),
        )
    }

    /// Flat concatenation (channel concat for `[c, cells]` grids).
    pub fn concat_flat(&mut self, parts: &[NodeId], shape: Vec<usize>) -> NodeId {
        let v: Vec<T> = parts.iter().flat_map(|&p| self.values[p].iter().copied()).collect();
        assert_eq!(v.len(), numel(&shape));
        let sizes: Vec<usize> = parts.iter().map(|&p| self.values[p].len()).collect();
        let parts = parts.to_vec();
        self.push(
            v,
            shape,
            Some(Box::new(move |_, g, gr| {
                let mut off = 0;
                for (k, &p) in parts.iter().enumerate() {
                    for (d, s) in gr.acc(p).iter_mut().zip(&g[off..off + sizes[k]]) {
                        *d += *s;
                    }
                    off += sizes[k];
                }
            })),
        )
    }

    /// Applies a fixed sparse linear map to a flat node.
    pub fn project(&mut self, x: NodeId, p: Arc<Projection>, shape: Vec<usize>) -> NodeId {
        assert_eq!(self.values[x].len(), p.n_in, "project: input size");
        assert_eq!(numel(&shape), p.n_out, "project: output shape");
        let v = p.apply(&self.values[x]);
        self.push(
            v,
            shape,
            Some(Box::new(move |_, g, gr| {
                p.bwd.apply(g, gr.acc(x), true);
            })),
        )
    }

    /// Per-segment, per-channel max over rows of `x: [n, c]`. Segments are
    /// consecutive row ranges given by their lengths; an empty segment
    /// yields zeros.
    pub fn segment_max(&mut self, x: NodeId, seg_lens: &[usize]) -> NodeId {
        let c = self.nodes[x].shape[1];
        let xv = &self.values[x];
        let ns = seg_lens.len();
        let mut v = vec![T::zero(); ns * c];
        let mut arg = vec![usize::MAX; ns * c];
        let mut start = 0;
        for (s, &len) in seg_lens.iter().enumerate() {
            for ch in 0..c {
                let mut best = None;
                for r in start..start + len {
                    let val = xv[r * c + ch];
                    // Strict comparison keeps the first maximizer.
                    if best.map_or(true, |(b, _)| val > b) {
                        best = Some((val, r));
                    }
                }
                if let Some((b, r)) = best {
                    v[s * c + ch] = b;
                    arg[s * c + ch] = r;
                }
            }
            start += len;
        }
        self.push(
            v,
            vec![ns, c],
            Some(Box::new(move |_, g, gr| {
                let d = gr.acc(x);
                for k in 0..g.len() {
                    if arg[k] != usize::MAX {
                        d[arg[k] * c + k % c] += g[k];
                    }
                }
            })),
        )
    }

    /// Scatters rows of `x: [n, c]` into a zero grid `[c, cells]` at the
    /// given cell indices.
    pub fn scatter_rows(&mut self, x: NodeId, cells_idx: &[usize], cells: usize) -> NodeId {
        let c = self.nodes[x].shape[1];
        let n = self.nodes[x].shape[0];
        assert_eq!(n, cells_idx.len());
        let xv = &self.values[x];
        let mut v = vec![T::zero(); c * cells];
        for (r, &cell) in cells_idx.iter().enumerate() {
            for ch in 0..c {
                v[ch * cells + cell] = xv[r * c + ch];
            }
        }
        let idx = cells_idx.to_vec();
        self.push(
            v,
            vec![c, cells],
            Some(Box::new(move |_, g, gr| {
                let d = gr.acc(x);
                for (r, &cell) in idx.iter().enumerate() {
                    for ch in 0..c {
                        d[r * c + ch] += g[ch * cells + cell];
                    }
                }
            })),
        )
    }

    // ----- grids [c, cells] -----

    /// Channel means `[1, c]` of a `[c, cells]` grid.
    pub fn spatial_mean(&mut self, x: NodeId) -> NodeId {
        let (c, cells) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        let inv = T::from(1.0 / cells as f64).unwrap();
        let v = self.values[x].chunks(cells).map(|ch| ch.iter().fold(T::zero(), |s, v| s + *v) * inv).collect();
        self.push(
            v,
            vec![1, c],
            Some(Box::new(move |_, g, gr| {
                let d = gr.acc(x);
                for ch in 0..c {
                    let gv = g[ch] * inv;
                    for v in &mut d[ch * cells..(ch + 1) * cells] {
                        *v += gv;
                    }
                }
            })),
        )
    }

    /// Adds a per-channel vector `[c]` (any shape with c entries) to a `[c, cells]` grid.
    pub fn add_channel_vec(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (c, cells) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        assert_eq!(self.values[b].len(), c);
        let bv = &self.values[b];
        let v = self.values[x].chunks(cells).zip(bv).flat_map(|(ch, b)| ch.iter().map(move |v| *v + *b)).collect();
        self.push(
            v,
            vec![c, cells],
            Some(Box::new(move |_, g, gr| {
                for (d, s) in gr.acc(x).iter_mut().zip(g) {
                    *d += *s;
                }
                let db = gr.acc(b);
                for ch in 0..c {
                    db[ch] += g[ch * cells..(ch + 1) * cells].iter().fold(T::zero(), |s, v| s + *v);
                }
            })),
        )
    }

    /// "Same"-size 3D convolution of `x: [cin, cells]` with `w: [cout, cin, k, k, k]`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, geom: ConvGeom) -> NodeId {
        let cells = geom.cells();
        let kk = geom.k.pow(3);
        assert_eq!(self.values[x].len(), geom.cin * cells, "conv3d: input size");
        assert_eq!(self.values[w].len(), geom.cout * geom.cin * kk, "conv3d: kernel size");
        let offsets = Arc::new(geom.offsets());
        let xv = &self.values[x];
        let wv = &self.values[w];
        let mut y = vec![T::zero(); geom.cout * cells];
        for co in 0..geom.cout {
            let yc = &mut y[co * cells..(co + 1) * cells];
            for ci in 0..geom.cin {
                let xc = &xv[ci * cells..(ci + 1) * cells];
                let wbase = (co * geom.cin + ci) * kk;
                for (o, runs) in offsets.iter() {
                    let wt = wv[wbase + o];
                    if wt == T::zero() {
                        continue;
                    }
                    for_each_run(geom.dims, runs, |d, s, l| axpy(wt, &xc[s..s + l], &mut yc[d..d + l]));
                }
            }
        }
        let shape = vec![geom.cout, cells];
        self.push(
            y,
            shape,
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x];
                let wv = &vals[w];
                {
                    let dx = gr.acc(x);
                    for co in 0..geom.cout {
                        let gc = &g[co * cells..(co + 1) * cells];
                        for ci in 0..geom.cin {
                            let dxc = &mut dx[ci * cells..(ci + 1) * cells];
                            let wbase = (co * geom.cin + ci) * kk;
                            for (o, runs) in offsets.iter() {
                                let wt = wv[wbase + o];
                                if wt == T::zero() {
                                    continue;
                                }
                                for_each_run(geom.dims, runs, |d, s, l| axpy(wt, &gc[d..d + l], &mut dxc[s..s + l]));
                            }
                        }
                    }
                }
                let dw = gr.acc(w);
                for co in 0..geom.cout {
                    let gc = &g[co * cells..(co + 1) * cells];
                    for ci in 0..geom.cin {
                        let xc = &xv[ci * cells..(ci + 1) * cells];
                        let wbase = (co * geom.cin + ci) * kk;
                        for (o, runs) in offsets.iter() {
                            let mut s_acc = T::zero();
                            for_each_run(geom.dims, runs, |d, s, l| s_acc += dot(&gc[d..d + l], &xc[s..s + l]));
                            dw[wbase + o] += s_acc;
                        }
                    }
                }
            })),
        )
    }

    /// `−log softmax(x)[target]` over all entries of `x`.
    pub fn cross_entropy(&mut self, x: NodeId, target: usize) -> NodeId {
        let xv = &self.values[x];
        assert!(target < xv.len());
        let mx = xv.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let lse = mx + xv.iter().fold(T::zero(), |s, v| s + (*v - mx).exp()).ln();
        let loss = lse - xv[target];
        self.push(
            vec![loss],
            vec![1],
            Some(Box::new(move |vals, g, gr| {
                let xv = &vals[x];
                let d = gr.acc(x);
                for i in 0..xv.len() {
                    d[i] += g[0] * (xv[i] - lse).exp();
                }
                d[target] -= g[0];
            })),
        )
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

pub fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(0, vec![3.0], vec![1, 1]);
        let y = t.matmul_nt(x, x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![1.0, 2.0], vec![2]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn circular_runs_cover_axis() {
        for shift in -9..=9 {
            let runs = axis_runs(4, shift, Padding::Circular);
            let mut seen = [false; 4];
            for (d, s, l) in runs {
                for k in 0..l {
                    assert_eq!((s + k) as i64, (d as i64 + k as i64 + shift).rem_euclid(4));
                    seen[d + k] = true;
                }
            }
            assert!(seen.iter().all(|&b| b));
        }
    }

    #[test]
    fn zero_padding_runs() {
        assert_eq!(axis_runs(4, 1, Padding::Zero), vec![(0, 1, 3)]);
        assert_eq!(axis_runs(4, -2, Padding::Zero), vec![(2, 0, 2)]);
        assert!(axis_runs(4, 5, Padding::Zero).is_empty());
    }

    #[test]
    fn uniform_cross_entropy() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![0.0; 64], vec![64]);
        let l = t.cross_entropy(x, 5);
        assert!((t.value(l)[0] - (64f64).ln()).abs() < 1e-12);
    }
}
