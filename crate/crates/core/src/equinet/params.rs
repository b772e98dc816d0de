//! Parameter storage and the AdamW optimizer.

use super::tape::{Grads, NodeId, Tape};
use super::{cast, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Human-readable typing note (e.g. input/output representations).
    pub rep: String,
}

/// Named `f64` parameter blocks. Tapes load them at their own precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub infos: Vec<ParamInfo>,
    pub values: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, rep: String) -> usize {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "param {name}: value count");
        self.infos.push(ParamInfo { name: name.to_string(), shape, rep });
        self.values.push(values);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn load<T: Real>(&self, tape: &mut Tape<T>, pid: usize) -> NodeId {
        tape.param(pid, cast(&self.values[pid]), self.infos[pid].shape.clone())
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.infos.iter().position(|i| i.name == name)
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|v| vec![0.0; v.len()]).collect()
    }

    /// Adds a tape's parameter gradients (times `weight`) into `acc`.
    pub fn accumulate<T: Real>(&self, tape: &Tape<T>, grads: &Grads<T>, weight: f64, acc: &mut [Vec<f64>]) {
        for &(node, pid) in tape.params() {
            if let Some(g) = grads.get(node) {
                for (a, v) in acc[pid].iter_mut().zip(g) {
                    *a += weight * v.to_f64().unwrap();
                }
            }
        }
    }

    /// Checks that `other` has identical names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::CheckpointMismatch(format!("{} parameter blocks vs {}", self.len(), other.len())));
        }
        for (a, b) in self.infos.iter().zip(&other.infos) {
            if a.name != b.name || a.shape != b.shape || a.rep != b.rep {
                return Err(Error::CheckpointMismatch(format!(
                    "block {} {:?} [{}] vs {} {:?} [{}]",
                    a.name, a.shape, a.rep, b.name, b.shape, b.rep
                )));
            }
        }
        Ok(())
    }
}

pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            t: 0,
            m: store.zero_grads(),
            v: store.zero_grads(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer: {} grads / {} states for {} params",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != store.values[i].len() || self.m[i].len() != g.len() {
                return Err(Error::ShapeMismatch(format!("optimizer: block {} size", store.infos[i].name)));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.values[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                p[j] *= 1.0 - self.lr * self.weight_decay;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
