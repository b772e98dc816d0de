//! Checkpoint container: model config text, named parameter blocks with
//! shapes and representation labels, optional optimizer state.

use std::path::Path;

use super::params::{AdamW, ParamInfo, ParamStore};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HEPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    /// Model-defining config (TOML) the parameters were built from.
    pub model_config: String,
    pub store: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u64(self.iteration);
        w.str(&self.model_config);
        w.u32(self.store.len() as u32);
        w.u8(self.optimizer.is_some() as u8);
        if let Some(o) = &self.optimizer {
            w.f64(o.lr);
            w.f64(o.weight_decay);
            w.f64(o.beta1);
            w.f64(o.beta2);
            w.f64(o.eps);
            w.u64(o.t);
        }
        for (i, info) in self.store.infos.iter().enumerate() {
            w.str(&info.name);
            w.str(&info.rep);
            w.u32(info.shape.len() as u32);
            for d in &info.shape {
                w.u64(*d as u64);
            }
            w.f64s(&self.store.values[i]);
            if let Some(o) = &self.optimizer {
                w.f64s(&o.m[i]);
                w.f64s(&o.v[i]);
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC, VERSION)?;
        let iteration = r.u64()?;
        let model_config = r.str()?;
        let n = r.u32()? as usize;
        let has_opt = r.u8()? != 0;
        let mut optimizer = if has_opt {
            Some(AdamW {
                lr: r.f64()?,
                weight_decay: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                t: r.u64()?,
                m: Vec::with_capacity(n),
                v: Vec::with_capacity(n),
            })
        } else {
            None
        };
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let rep = r.str()?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated)?;
            let values = r.f64s(count)?;
            store.infos.push(ParamInfo { name, shape, rep });
            store.values.push(values);
            if let Some(o) = optimizer.as_mut() {
                o.m.push(r.f64s(count)?);
                o.v.push(r.f64s(count)?);
            }
        }
        r.expect_done()?;
        Ok(Self { iteration, model_config, store, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes through a sibling temp file and renames, so a crash never leaves
/// a half-written artifact at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer() {
        let mut store = ParamStore::new();
        store.add("a.weight", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0], "1x0/C4 -> 1xreg/C4".into());
        store.add("a.bias", vec![4], vec![0.25; 4], "1xreg/C4".into());
        let mut opt = AdamW::new(&store, 1e-3, 5e-4, (0.9, 0.999), 1e-8);
        opt.t = 7;
        opt.m[0][1] = 0.5;
        let ck = Checkpoint { iteration: 42, model_config: "x = 1\n".into(), store, optimizer: Some(opt) };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]), Err(Error::Truncated)));
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum)));
        let mut other = bytes;
        other[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&other), Err(Error::BadMagic(_))));
    }
}
