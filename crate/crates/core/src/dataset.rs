//! Dataset and voxel-grid dump containers. Byte layouts are documented in
//! FORMATS.md at the repository root.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::equinet::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::group::{GroupElement, RepSpec};
use crate::scene::{
    ActionChunk, DemoMeta, Demonstration, Frame, GripperState, Observation, PointCloud, TaskId, TrainingPair,
};
use crate::voxel::{VoxelGrid, VoxelGridSpec};

pub const DATASET_MAGIC: &[u8; 4] = b"HEPD";
pub const DATASET_VERSION: u32 = 1;
pub const GRID_MAGIC: &[u8; 4] = b"HEPG";
pub const GRID_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub kf: usize,
    pub m: usize,
    pub t_hist: usize,
    pub t_act: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetContent {
    Demos(Vec<Demonstration>),
    Pairs(Vec<TrainingPair>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub content: DatasetContent,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match &self.content {
            DatasetContent::Demos(d) => d.len(),
            DatasetContent::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match &self.content {
            DatasetContent::Demos(_) => "demos",
            DatasetContent::Pairs(_) => "pairs",
        }
    }
}

fn write_state(w: &mut Writer, s: &GripperState) {
    w.f64s(&s.position);
    for row in &s.q {
        w.f64s(row);
    }
    w.f64(s.c);
}

fn read_state(r: &mut Reader) -> Result<GripperState> {
    let v = r.f64s(13)?;
    let s = GripperState {
        position: [v[0], v[1], v[2]],
        q: [[v[3], v[4], v[5]], [v[6], v[7], v[8]], [v[9], v[10], v[11]]],
        c: v[12],
    };
    s.validate()?;
    Ok(s)
}

fn check_obs(h: &DatasetHeader, o: &Observation) -> Result<()> {
    if o.cloud.kf() != h.kf {
        return Err(Error::FeatureWidth { header: h.kf, record: o.cloud.kf() });
    }
    if o.state_history.len() != h.t_hist || o.action_history.len() != h.t_act {
        return Err(Error::ShapeMismatch(format!(
            "observation history {}+{} does not match header {}+{}",
            o.state_history.len(),
            o.action_history.len(),
            h.t_hist,
            h.t_act
        )));
    }
    Ok(())
}

fn write_obs(w: &mut Writer, o: &Observation) {
    w.u64(o.cloud.len() as u64);
    w.u32(o.cloud.kf() as u32);
    for p in o.cloud.positions() {
        w.f64s(p);
    }
    w.f64s(o.cloud.features());
    for s in o.state_history.iter().chain(&o.action_history) {
        write_state(w, s);
    }
}

fn read_obs(r: &mut Reader, h: &DatasetHeader) -> Result<Observation> {
    let n = r.u64()? as usize;
    let kf = r.u32()? as usize;
    if kf != h.kf {
        return Err(Error::FeatureWidth { header: h.kf, record: kf });
    }
    let flat = r.f64s(n.checked_mul(3).ok_or(Error::Truncated)?)?;
    let positions = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let features = r.f64s(n.checked_mul(kf).ok_or(Error::Truncated)?)?;
    let cloud = PointCloud::from_parts(kf, positions, features)?;
    let state_history = (0..h.t_hist).map(|_| read_state(r)).collect::<Result<Vec<_>>>()?;
    let action_history = (0..h.t_act).map(|_| read_state(r)).collect::<Result<Vec<_>>>()?;
    Observation::new(cloud, state_history, action_history)
}

fn write_group(w: &mut Writer, g: &GroupElement) {
    w.f64s(&g.t);
    w.u32(g.m);
    w.u32(g.u);
}

fn read_group(r: &mut Reader) -> Result<GroupElement> {
    let t = r.f64s(3)?;
    let m = r.u32()?;
    let u = r.u32()?;
    if u == 0 || m >= u {
        return Err(Error::InvalidArgument(format!("bad stored group element r^{m} of C{u}")));
    }
    GroupElement::new([t[0], t[1], t[2]], m, u)
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let h = &ds.header;
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    w.u8(match ds.content {
        DatasetContent::Demos(_) => 0,
        DatasetContent::Pairs(_) => 1,
    });
    w.u32(h.kf as u32);
    w.u32(h.m as u32);
    w.u32(h.t_hist as u32);
    w.u32(h.t_act as u32);
    w.u64(ds.len() as u64);
    match &ds.content {
        DatasetContent::Demos(demos) => {
            for d in demos {
                d.validate()?;
                w.u32(d.meta.task.code());
                w.u64(d.meta.seed);
                write_group(&mut w, &d.meta.transform);
                w.u64(d.frames.len() as u64);
                for f in &d.frames {
                    check_obs(h, &f.obs)?;
                    w.u64(f.tick);
                    write_obs(&mut w, &f.obs);
                    write_state(&mut w, &f.state);
                }
            }
        }
        DatasetContent::Pairs(pairs) => {
            for p in pairs {
                check_obs(h, &p.obs)?;
                if p.target_chunk.len() != h.m {
                    return Err(Error::ShapeMismatch(format!(
                        "chunk length {} does not match header horizon {}",
                        p.target_chunk.len(),
                        h.m
                    )));
                }
                write_obs(&mut w, &p.obs);
                for s in &p.target_chunk.steps {
                    write_state(&mut w, s);
                }
                w.f64s(&p.target_keypose);
            }
        }
    }
    Ok(w.finish())
}

pub fn dataset_from_bytes(data: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(data, DATASET_MAGIC, DATASET_VERSION)?;
    let kind = r.u8()?;
    let header = DatasetHeader {
        kf: r.u32()? as usize,
        m: r.u32()? as usize,
        t_hist: r.u32()? as usize,
        t_act: r.u32()? as usize,
    };
    let count = r.u64()? as usize;
    let content = match kind {
        0 => {
            let mut demos = Vec::new();
            for _ in 0..count {
                let code = r.u32()?;
                let task = TaskId::from_code(code)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown task code {code}")))?;
                let seed = r.u64()?;
                let transform = read_group(&mut r)?;
                let n = r.u64()? as usize;
                let mut frames = Vec::new();
                for _ in 0..n {
                    let tick = r.u64()?;
                    let obs = read_obs(&mut r, &header)?;
                    let state = read_state(&mut r)?;
                    frames.push(Frame { tick, obs, state });
                }
                demos.push(Demonstration::new(frames, DemoMeta { task, seed, transform })?);
            }
            DatasetContent::Demos(demos)
        }
        1 => {
            let mut pairs = Vec::new();
            for _ in 0..count {
                let obs = read_obs(&mut r, &header)?;
                let steps = (0..header.m).map(|_| read_state(&mut r)).collect::<Result<Vec<_>>>()?;
                let k = r.f64s(3)?;
                pairs.push(TrainingPair { obs, target_chunk: ActionChunk::new(steps)?, target_keypose: [k[0], k[1], k[2]] });
            }
            DatasetContent::Pairs(pairs)
        }
        other => return Err(Error::InvalidArgument(format!("unknown dataset kind {other}"))),
    };
    r.expect_done()?;
    Ok(Dataset { header, content })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<Vec<u8>> {
    let bytes = dataset_to_bytes(ds)?;
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

/// A labelled voxel grid for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDump {
    pub label: String,
    pub grid: VoxelGrid,
}

pub fn grid_to_bytes(d: &GridDump) -> Vec<u8> {
    let s = &d.grid.spec;
    let mut w = Writer::new(GRID_MAGIC, GRID_VERSION);
    w.str(&d.label);
    w.f64s(&s.origin);
    w.f64(s.resolution);
    for v in s.dims {
        w.u64(v as u64);
    }
    w.u64(s.max_points_per_voxel as u64);
    w.str(&d.grid.rep.to_string());
    w.f64s(&d.grid.data);
    w.finish()
}

pub fn grid_from_bytes(data: &[u8]) -> Result<GridDump> {
    let mut r = Reader::open(data, GRID_MAGIC, GRID_VERSION)?;
    let label = r.str()?;
    let o = r.f64s(3)?;
    let res = r.f64()?;
    let dims = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
    let maxp = r.u64()? as usize;
    let rep: RepSpec = r.str()?.parse()?;
    let spec = VoxelGridSpec::new([o[0], o[1], o[2]], res, dims, maxp)?;
    let n = spec.num_cells().checked_mul(rep.dim()).ok_or(Error::Truncated)?;
    let data = r.f64s(n)?;
    r.expect_done()?;
    Ok(GridDump { label, grid: VoxelGrid::from_data(spec, rep, data)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::IDENTITY3;

    fn header() -> DatasetHeader {
        DatasetHeader { kf: 3, m: 2, t_hist: 1, t_act: 3 }
    }

    fn pair(x: f64) -> TrainingPair {
        let s = GripperState::new([x, 0.1, 0.2], IDENTITY3, 1.0).unwrap();
        let mut cloud = PointCloud::new(3);
        cloud.push([x, 1.0 / 3.0, 0.7], &[0.1, 0.2, 0.3]).unwrap();
        TrainingPair {
            obs: Observation::new(cloud, vec![s], vec![s; 3]).unwrap(),
            target_chunk: ActionChunk::new(vec![s, s]).unwrap(),
            target_keypose: [x, std::f64::consts::PI, -1e-300],
        }
    }

    #[test]
    fn empty_and_single_round_trip() {
        for pairs in [vec![], vec![pair(0.123456789)]] {
            let ds = Dataset { header: header(), content: DatasetContent::Pairs(pairs) };
            let bytes = dataset_to_bytes(&ds).unwrap();
            assert_eq!(dataset_from_bytes(&bytes).unwrap(), ds);
        }
    }

    #[test]
    fn distinct_errors() {
        let ds = Dataset { header: header(), content: DatasetContent::Pairs(vec![pair(0.5)]) };
        let bytes = dataset_to_bytes(&ds).unwrap();
        assert!(matches!(dataset_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated)));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(dataset_from_bytes(&v), Err(Error::VersionMismatch { found: 9, .. })));

        let mut bad = header();
        bad.kf = 4;
        let ds = Dataset { header: bad, content: DatasetContent::Pairs(vec![pair(0.5)]) };
        assert!(matches!(dataset_to_bytes(&ds), Err(Error::FeatureWidth { header: 4, record: 3 })));
    }
}
