//! Equivariance and gradient audit.
//!
//! Every check reports the largest residual it saw against a fixed
//! tolerance. Checks run on whatever weights the model holds: symmetry is
//! a property of the architecture, so fresh random weights must pass too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::env::rollout::sample_episodes;
use crate::env::{reset, POINT_FEATURES};
use crate::equinet::layers::nonlinearity;
use crate::equinet::pointnet::{BoundPointNet, PointNet};
use crate::equinet::rep::Rep;
use crate::equinet::tape::Padding;
use crate::equinet::{cast, uncast, ParamStore, Real, Tape};
use crate::error::{Error, Result};
use crate::group::{compose, inverse, rep_matrix, GroupElement, RepSpec};
use crate::high_level::{select_keypose, Heatmap};
use crate::lattice::{snap3, snap_sensor3};
use crate::low_level::{
    action_rep, frame_transfer_action, frame_transfer_obs, pi_full, pi_low, Denoiser, LowBatch,
    PositionSensitiveStub, RngNoise, TransformedNoise,
};
use crate::math::{self, Vec3};
use crate::model::Model;
use crate::scene::{ActionChunk, GripperState, Observation, PointCloud};
use crate::voxel::{encode_stacked, partition, VoxelGridSpec};

pub const REPORT_HEADER: &str = "check,max_residual,tolerance,pass";

pub const LAYER_TOL: f64 = 1e-6;
pub const UNET_TOL: f64 = 1e-4;
pub const STACKED_TOL_F32: f64 = 1e-5;
pub const STACKED_TOL_F64: f64 = 1e-10;
pub const POLICY_TOL: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
pub const SOFTMAX_TOL: f64 = 1e-6;
/// Argmax comparisons only count scenes whose best logit leads by this much.
pub const ARGMAX_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: &str, max_residual: f64, tolerance: f64) -> Self {
        // NaN residuals fail.
        let pass = max_residual <= tolerance;
        Self { name: name.to_string(), max_residual, tolerance, pass }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub checks: Vec<Check>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for c in &self.checks {
            s.push_str(&format!("{},{:e},{:e},{}\n", c.name, c.max_residual, c.tolerance, c.pass));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditOptions {
    pub seed: u64,
    /// Random clouds for the stacked-voxel check.
    pub clouds: usize,
    /// Scenes for the heatmap and policy checks.
    pub scenes: usize,
    pub tau_inputs: usize,
    pub grad_params: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self { seed: 0, clouds: 20, scenes: 10, tau_inputs: 100, grad_params: 200 }
    }
}

/// Runs the full suite.
pub fn run_audit(model: &Model, cfg: &RunConfig, opts: &AuditOptions) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xA0D1_7000);
    let u = model.high.u;
    let mut checks = vec![group_homomorphism(u, 200, &mut rng)?];

    // The raster ablation has no stacked encoder; audit a standalone one.
    let mut spare_store = ParamStore::new();
    let spare;
    let (pn, pn_store) = match model.high.stacked_encoder() {
        Some(pn) => (pn, &model.store),
        None => {
            let spec = &model.high.spec;
            spare = PointNet::new(
                &mut spare_store,
                "audit.pointnet",
                u,
                POINT_FEATURES,
                spec.resolution,
                cfg.model.pointnet_hidden,
                cfg.stacked_out()?,
                true,
                &mut rng,
            )?;
            (&spare, &spare_store)
        }
    };
    let clouds: Vec<PointCloud> = (0..opts.clouds).map(|_| inner_cloud(&model.high.spec, &mut rng)).collect();
    checks.push(stacked_voxel::<f32>(pn, pn_store, &model.high.spec, &clouds, STACKED_TOL_F32)?);
    checks.push(stacked_voxel::<f64>(pn, pn_store, &model.high.spec, &clouds, STACKED_TOL_F64)?);

    checks.extend(layer_checks(model, &mut rng)?);

    let scenes = audit_scenes(cfg, opts.scenes, opts.seed)?;
    checks.extend(heatmap_checks(model, &scenes)?);
    checks.extend(policy_rotation_checks(model, &scenes, opts.seed)?);
    let stub = PositionSensitiveStub { m: model.low.shape.m, pos_scale: model.low.cfg.pos_scale };
    let eps = model.bind();
    checks.push(translation_chain("pi.translation", model, &eps, &scenes, opts.seed)?);
    checks.push(translation_chain("pi.translation_stub", model, &stub, &scenes, opts.seed)?);
    checks.push(frame_transfer_laws(opts.tau_inputs, &mut rng)?);
    checks.push(gradient_check(model, &scenes, opts.grad_params, &mut rng)?);
    Ok(AuditReport { checks })
}

fn lattice_vec(rng: &mut impl Rng, half: f64) -> Vec3 {
    snap3([rng.gen_range(-half..half), rng.gen_range(-half..half), rng.gen_range(-half..half)])
}

/// `act(compose(g2, g1)) = act(g2) ∘ act(g1)`, `g⁻¹ g = e`, and the same
/// laws for representation matrices.
pub fn group_homomorphism(u: u32, trials: usize, rng: &mut impl Rng) -> Result<Check> {
    let spec = RepSpec::new(1, 1, 1, u)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let g1 = GroupElement::new(lattice_vec(rng, 0.5), rng.gen_range(0..u), u)?;
        let g2 = GroupElement::new(lattice_vec(rng, 0.5), rng.gen_range(0..u), u)?;
        let p = lattice_vec(rng, 0.5);
        let g21 = compose(&g2, &g1)?;
        let lhs = g21.act_position(p);
        let rhs = g2.act_position(g1.act_position(p));
        let back = compose(&inverse(&g1), &g1)?.act_position(p);
        for k in 0..3 {
            worst = worst.max((lhs[k] - rhs[k]).abs()).max((back[k] - p[k]).abs());
        }
        let (a, b, ab) = (rep_matrix(&spec, &g2)?, rep_matrix(&spec, &g1)?, rep_matrix(&spec, &g21)?);
        let d = spec.dim();
        for i in 0..d {
            for j in 0..d {
                let prod: f64 = (0..d).map(|k| a[i][k] * b[k][j]).sum();
                worst = worst.max((prod - ab[i][j]).abs());
            }
        }
    }
    Ok(Check::new("group.homomorphism", worst, 1e-12))
}

/// Random cloud confined to the cells at least two voxels from every face,
/// so shifts of up to two voxels stay inside the grid. A few voxels are
/// overfilled to exercise truncation.
pub fn inner_cloud(spec: &VoxelGridSpec, rng: &mut impl Rng) -> PointCloud {
    let mut cloud = PointCloud::new(POINT_FEATURES);
    let r = spec.resolution;
    let voxels = rng.gen_range(4..12);
    for _ in 0..voxels {
        let idx = [0, 1, 2].map(|k| rng.gen_range(2..spec.dims[k] - 2));
        let c = spec.index_to_center(idx);
        let n = if rng.gen_bool(0.3) { spec.max_points_per_voxel + 3 } else { rng.gen_range(1..4) };
        for _ in 0..n {
            let off = [0; 3].map(|_| rng.gen_range(-0.45 * r..0.45 * r));
            let p = snap_sensor3(math::add(c, off));
            let f: Vec<f64> = (0..POINT_FEATURES).map(|_| rng.gen_range(0.0..1.0)).collect();
            cloud.push(p, &f).expect("feature width matches");
        }
    }
    cloud
}

/// `ν(gP) = g·ν(P)` for every rotation and every whole-voxel shift with
/// all offsets in `[-2, 2]`.
pub fn stacked_voxel<T: Real>(
    pn: &PointNet,
    store: &ParamStore,
    spec: &VoxelGridSpec,
    clouds: &[PointCloud],
    tol: f64,
) -> Result<Check> {
    let enc = BoundPointNet::<T>::new(pn, store);
    let mut worst: f64 = 0.0;
    for cloud in clouds {
        let base = encode_stacked(&partition(cloud, spec), &enc, &pn.out_spec)?;
        for m in 0..pn.u {
            for dz in -2i32..=2 {
                for dy in -2i32..=2 {
                    for dx in -2i32..=2 {
                        let t = [dx, dy, dz].map(|d| d as f64 * spec.resolution);
                        let g = GroupElement::new(t, m, pn.u)?;
                        let moved = encode_stacked(&partition(&g.act_cloud(cloud), spec), &enc, &pn.out_spec)?;
                        worst = worst.max(moved.max_abs_diff(&g.act_voxelmap(&base)?));
                    }
                }
            }
        }
    }
    let name = if std::mem::size_of::<T>() == 4 { "stacked_voxel.f32" } else { "stacked_voxel.f64" };
    Ok(Check::new(name, worst, tol))
}

fn normals(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Circular shift of `[channels][z][y][x]` data.
pub fn roll(data: &[f64], dims: [usize; 3], shift: [i64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let cells = nx * ny * nz;
    let wrap = |i: usize, s: i64, n: usize| (i as i64 + s).rem_euclid(n as i64) as usize;
    let mut out = vec![0.0; data.len()];
    for (ch, block) in data.chunks(cells).enumerate() {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let dst = (wrap(z, shift[2], nz) * ny + wrap(y, shift[1], ny)) * nx + wrap(x, shift[0], nx);
                    out[ch * cells + dst] = block[(z * ny + y) * nx + x];
                }
            }
        }
    }
    out
}

const ROLLS: [[i64; 3]; 3] = [[1, 0, 0], [0, -1, 0], [2, 1, 1]];

/// Per-layer and per-network equivariance on random inputs.
pub fn layer_checks(model: &Model, rng: &mut impl Rng) -> Result<Vec<Check>> {
    let store = &model.store;
    let u = model.high.u;
    let dims = model.high.spec.dims;
    let cells = model.high.spec.num_cells();

    let mut linears: Vec<_> = model.low.layers().collect();
    linears.push(model.high.unet.global_layer());
    if let Some(pn) = model.high.stacked_encoder() {
        linears.extend(pn.layers());
    }
    let mut lin: f64 = 0.0;
    for l in &linears {
        let x = normals(3 * l.in_rep.dim(), rng);
        let y = linear_rows(l, store, &x)?;
        for m in 0..u {
            let gy = l.out_rep.apply_rows(m, &y);
            let yg = linear_rows(l, store, &l.in_rep.apply_rows(m, &x))?;
            lin = lin.max(max_diff(&gy, &yg));
        }
    }

    let mut conv: f64 = 0.0;
    for c in model.high.unet.convs() {
        let x = normals(c.in_rep.dim() * cells, rng);
        let run = |x: &[f64]| -> Result<Vec<f64>> {
            let mut tape = Tape::<f64>::new();
            let xi = tape.constant(x.to_vec(), vec![c.in_rep.dim(), cells]);
            let y = c.forward(&mut tape, store, xi, dims)?;
            Ok(tape.value(y).to_vec())
        };
        let y = run(&x)?;
        let (gin, gout) = (Rep::grid(dims, &c.in_rep)?, Rep::grid(dims, &c.out_rep)?);
        for m in 0..u {
            conv = conv.max(max_diff(&gout.apply(m, &y), &run(&gin.apply(m, &x))?));
        }
        if c.padding == Padding::Circular {
            for s in ROLLS {
                conv = conv.max(max_diff(&roll(&y, dims, s), &run(&roll(&x, dims, s))?));
            }
        }
    }

    let reg = Rep::regular(3, u);
    let mut nl: f64 = 0.0;
    let x = normals(reg.dim() * 4, rng);
    let act = |x: &[f64]| -> Result<Vec<f64>> {
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.to_vec(), vec![4, reg.dim()]);
        let y = nonlinearity(&mut tape, xi, &reg)?;
        Ok(tape.value(y).to_vec())
    };
    let y = act(&x)?;
    for m in 0..u {
        nl = nl.max(max_diff(&reg.apply_rows(m, &y), &act(&reg.apply_rows(m, &x))?));
    }

    let mut out = vec![
        Check::new("layer.linear", lin, LAYER_TOL),
        Check::new("layer.conv", conv, LAYER_TOL),
        Check::new("layer.nonlinearity", nl, LAYER_TOL),
    ];
    if let Some(pn) = model.high.stacked_encoder() {
        out.push(Check::new("layer.pointnet", pointnet_set(pn, store, rng)?, LAYER_TOL));
    }
    out.push(Check::new("layer.unet", unet_check(model, rng)?, UNET_TOL));
    out.push(Check::new("layer.eps", eps_check(model, rng), LAYER_TOL));
    Ok(out)
}

fn linear_rows(l: &crate::equinet::layers::EqLinear, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    let d = l.in_rep.dim();
    let mut tape = Tape::<f64>::new();
    let xi = tape.constant(x.to_vec(), vec![x.len() / d, d]);
    let y = l.forward(&mut tape, store, xi)?;
    Ok(tape.value(y).to_vec())
}

/// Rotating the relative positions of one point set rotates the encoding;
/// reordering the points leaves it unchanged.
fn pointnet_set(pn: &PointNet, store: &ParamStore, rng: &mut impl Rng) -> Result<f64> {
    let out_rep = Rep::from_spec(&pn.out_spec)?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(1..8);
        let rel: Vec<Vec3> = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-pn.length_scale..pn.length_scale))).collect();
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..pn.kf).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let fr: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let y = pn.encode_set_with::<f64>(store, &rel, &fr)?;
        let rev_rel: Vec<Vec3> = rel.iter().rev().copied().collect();
        let rev_f: Vec<&[f64]> = fr.iter().rev().copied().collect();
        worst = worst.max(max_diff(&y, &pn.encode_set_with::<f64>(store, &rev_rel, &rev_f)?));
        for m in 0..pn.u {
            let g = GroupElement::rotation(m, pn.u)?;
            let rot: Vec<Vec3> = rel.iter().map(|p| g.act_position(*p)).collect();
            let yg = pn.encode_set_with::<f64>(store, &rot, &fr)?;
            worst = worst.max(max_diff(&yg, &out_rep.apply(m, &y)));
        }
    }
    Ok(worst)
}

fn unet_check(model: &Model, rng: &mut impl Rng) -> Result<f64> {
    let unet = &model.high.unet;
    let dims = model.high.spec.dims;
    let cells = model.high.spec.num_cells();
    let c = unet.in_rep.dim();
    let run = |x: &[f64]| -> Result<Vec<f64>> {
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.to_vec(), vec![c, cells]);
        let y = unet.forward(&mut tape, &model.store, xi, dims)?;
        Ok(tape.value(y).to_vec())
    };
    let x = normals(c * cells, rng);
    let y = run(&x)?;
    let gin = Rep::grid(dims, &unet.in_rep)?;
    let gout = Rep::grid(dims, &Rep::trivial(1, model.high.u))?;
    let mut worst: f64 = 0.0;
    for m in 0..model.high.u {
        worst = worst.max(max_diff(&gout.apply(m, &y), &run(&gin.apply(m, &x))?));
    }
    if unet.cfg.circular {
        for s in ROLLS {
            worst = worst.max(max_diff(&roll(&y, dims, s), &run(&roll(&x, dims, s))?));
        }
    }
    Ok(worst)
}

/// Clean-action estimator of the noise predictor on random input rows.
fn eps_check(model: &Model, rng: &mut impl Rng) -> f64 {
    let net = &model.low;
    let frozen = net.freeze(&model.store);
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let x = normals(net.in_rep.dim(), rng);
        let y = frozen.forward(&x);
        for m in 0..net.shape.u {
            worst = worst.max(max_diff(&frozen.forward(&net.in_rep.apply(m, &x)), &net.action_rep.apply(m, &y)));
        }
    }
    worst
}

/// Environment observations under randomized scene transforms.
pub fn audit_scenes(cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<Observation>> {
    sample_episodes(n, seed.wrapping_add(0xA0D1), &cfg.eval.transforms, cfg.env.resolution)
        .into_iter()
        .map(|(s, g)| reset(cfg.task, s, &g, &cfg.env, cfg.t_hist, cfg.t_act).map(|(_, o)| o))
        .collect()
}

fn all_inside(obs: &Observation, spec: &VoxelGridSpec) -> bool {
    obs.cloud.positions().iter().all(|p| spec.contains(*p))
        && obs.state_history.iter().chain(&obs.action_history).all(|s| spec.contains(s.position))
}

/// Heatmap rotation equivariance, softmax normalization, and exact argmax
/// equivariance over rotations and one-voxel shifts on scenes with a
/// unique argmax.
pub fn heatmap_checks(model: &Model, scenes: &[Observation]) -> Result<Vec<Check>> {
    let spec = &model.high.spec;
    let u = model.high.u;
    let r = spec.resolution;
    let (mut rot, mut soft, mut arg): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut compared = 0;
    for o in scenes {
        let hm = model.high.heatmap(&model.store, o)?;
        soft = soft.max((hm.softmax().iter().sum::<f64>() - 1.0).abs());
        let key = select_keypose(&hm);
        let unique = hm.margin() > ARGMAX_MARGIN;
        for m in 0..u {
            for t in [[0.0; 3], [r, 0.0, 0.0], [0.0, -r, 0.0], [0.0, 0.0, r]] {
                let g = GroupElement::new(t, m, u)?;
                let go = g.act_observation(o)?;
                if !all_inside(&go, spec) {
                    continue;
                }
                let ghm = model.high.heatmap(&model.store, &go)?;
                if t == [0.0; 3] {
                    rot = rot.max(ghm.grid.max_abs_diff(&g.act_voxelmap(&hm.grid)?));
                }
                let gk = g.act_position(key);
                if unique && spec.contains(gk) {
                    compared += 1;
                    arg = arg.max(math::norm(math::sub(select_keypose(&ghm), gk)));
                }
            }
        }
    }
    if compared == 0 {
        arg = f64::INFINITY;
    }
    Ok(vec![
        Check::new("heatmap.rotation", rot, UNET_TOL),
        Check::new("heatmap.softmax", soft, SOFTMAX_TOL),
        Check::new("heatmap.argmax", arg, 0.0),
    ])
}

fn chunk_diff(a: &ActionChunk, b: &ActionChunk) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

fn unique_argmax(model: &Model, o: &Observation) -> Result<Option<Heatmap>> {
    let hm = model.high.heatmap(&model.store, o)?;
    Ok((hm.margin() > ARGMAX_MARGIN).then_some(hm))
}

/// `π_low(g·o, g·t) = g·π_low(o, t)` and `π(g·o) = g·π(o)` for every
/// rotation, with the diffusion noise drawn once and rotated for the
/// transformed run.
pub fn policy_rotation_checks(model: &Model, scenes: &[Observation], seed: u64) -> Result<Vec<Check>> {
    let u = model.high.u;
    let eps = model.bind();
    let arep = action_rep(model.low.shape.m, u)?;
    let (mut low, mut full): (f64, f64) = (0.0, 0.0);
    let mut compared = 0;
    for (i, o) in scenes.iter().enumerate() {
        let noise_seed = seed.wrapping_mul(31).wrapping_add(i as u64);
        let hm = model.high.heatmap(&model.store, o)?;
        let t = select_keypose(&hm);
        let base = pi_low(&eps, &model.sched, o, t, &mut RngNoise::seeded(noise_seed))?;
        let unique = hm.margin() > ARGMAX_MARGIN;
        for m in 0..u {
            let g = GroupElement::rotation(m, u)?;
            let go = g.act_observation(o)?;
            let gt = g.act_position(t);
            let mut noise = TransformedNoise { inner: RngNoise::seeded(noise_seed), rep: arep.clone(), m };
            let moved = pi_low(&eps, &model.sched, &go, gt, &mut noise)?;
            low = low.max(chunk_diff(&moved, &g.act_chunk(&base)?));
            if unique {
                compared += 1;
                let mut noise = TransformedNoise { inner: RngNoise::seeded(noise_seed), rep: arep.clone(), m };
                let (k, chunk) = pi_full(&model.high, &model.store, &eps, &model.sched, &go, &mut noise)?;
                let kd = math::norm(math::sub(k, gt));
                full = full.max(kd).max(chunk_diff(&chunk, &g.act_chunk(&base)?));
            }
        }
    }
    if compared == 0 {
        full = f64::INFINITY;
    }
    Ok(vec![Check::new("pi_low.rotation", low, POLICY_TOL), Check::new("pi.rotation", full, POLICY_TOL)])
}

/// `π(o + Δ) = Δ + π(o)` bit for bit for whole-voxel shifts, on scenes
/// with a unique argmax, with the same noise stream on both sides.
/// Residual is the largest absolute difference; any nonzero value fails.
pub fn translation_chain(
    name: &str,
    model: &Model,
    den: &dyn Denoiser,
    scenes: &[Observation],
    seed: u64,
) -> Result<Check> {
    let spec = &model.high.spec;
    let r = spec.resolution;
    let shifts = [[r, 0.0, 0.0], [0.0, -r, 0.0], [-r, r, 0.0], [0.0, 0.0, r], [2.0 * r, 0.0, -r]];
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for (i, o) in scenes.iter().enumerate() {
        let Some(hm) = unique_argmax(model, o)? else { continue };
        let t = select_keypose(&hm);
        let noise_seed = seed.wrapping_mul(37).wrapping_add(i as u64);
        let (k0, c0) = pi_full(&model.high, &model.store, den, &model.sched, o, &mut RngNoise::seeded(noise_seed))?;
        for d in shifts {
            let od = o.translated(d);
            if !all_inside(&od, spec) || !spec.contains(math::add(t, d)) {
                continue;
            }
            compared += 1;
            let (k1, c1) = pi_full(&model.high, &model.store, den, &model.sched, &od, &mut RngNoise::seeded(noise_seed))?;
            let want_k = math::add(k0, d);
            let want_c = c0.translated(d);
            if k1 != want_k || c1 != want_c {
                let kd = math::norm(math::sub(k1, want_k));
                worst = worst.max(kd).max(chunk_diff(&c1, &want_c)).max(f64::MIN_POSITIVE);
            }
        }
    }
    if compared == 0 {
        worst = f64::INFINITY;
    }
    Ok(Check::new(name, worst, 0.0))
}

fn random_state(rng: &mut impl Rng) -> GripperState {
    let g = GroupElement::rotation(rng.gen_range(0..4), 4).expect("u = 4");
    GripperState { position: lattice_vec(rng, 0.5), q: g.rot3(), c: rng.gen_range(0.0..1.0) }
}

/// Random lattice observation with histories of one state and three actions.
pub fn random_observation(rng: &mut impl Rng) -> Observation {
    let mut cloud = PointCloud::new(POINT_FEATURES);
    for _ in 0..rng.gen_range(1..40) {
        let p = snap_sensor3([0; 3].map(|_| rng.gen_range(-0.5..0.5)));
        let f: Vec<f64> = (0..POINT_FEATURES).map(|_| rng.gen_range(0.0..1.0)).collect();
        cloud.push(p, &f).expect("feature width matches");
    }
    Observation {
        cloud,
        state_history: vec![random_state(rng)],
        action_history: (0..3).map(|_| random_state(rng)).collect(),
    }
}

/// `τ(o, 0) = o`, `τ(τ(o, t), −t) = o` and `τ(o + s, t + s) = τ(o, t)`,
/// exactly, on lattice inputs; the same laws on action chunks.
pub fn frame_transfer_laws(n: usize, rng: &mut impl Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut bump = |exact: bool, diff: f64| {
        if !exact {
            worst = worst.max(diff).max(f64::MIN_POSITIVE);
        }
    };
    for _ in 0..n {
        let o = random_observation(rng);
        let a = ActionChunk::new((0..4).map(|_| random_state(rng)).collect())?;
        let (t, s) = (lattice_vec(rng, 0.5), lattice_vec(rng, 0.5));

        let o0 = frame_transfer_obs(&o, [0.0; 3]);
        bump(o0 == o, o0.max_abs_diff(&o));
        let o1 = frame_transfer_obs(&frame_transfer_obs(&o, t), math::neg(t));
        bump(o1 == o, o1.max_abs_diff(&o));
        let lhs = frame_transfer_obs(&o.translated(s), math::add(t, s));
        let rhs = frame_transfer_obs(&o, t);
        bump(lhs == rhs, lhs.max_abs_diff(&rhs));

        let a0 = frame_transfer_action(&a, [0.0; 3]);
        bump(a0 == a, a0.max_abs_diff(&a));
        let a1 = frame_transfer_action(&frame_transfer_action(&a, t), math::neg(t));
        bump(a1 == a, a1.max_abs_diff(&a));
        let al = frame_transfer_action(&a.translated(s), math::add(t, s));
        let ar = frame_transfer_action(&a, t);
        bump(al == ar, al.max_abs_diff(&ar));
    }
    Ok(Check::new("frame_transfer", worst, 0.0))
}

/// Central finite differences (fourth-order stencil) against reverse-mode gradients for randomly
/// chosen scalars, cycling through every parameter block so each layer
/// type is covered. The relative error is `|a − n| / max(|a|, |n|, 1e-6)`;
/// the floor keeps structurally zero gradients (raw weights the symmetry
/// projection discards) from dividing rounding noise by zero.
pub fn gradient_check(model: &Model, scenes: &[Observation], n: usize, rng: &mut impl Rng) -> Result<Check> {
    let obs = scenes.first().ok_or_else(|| Error::InvalidArgument("gradient check needs a scene".into()))?;
    let spec = &model.high.spec;
    let target = spec.index_to_center([0, 1, 2].map(|k| rng.gen_range(0..spec.dims[k])));

    let net = &model.low;
    let cond = if net.shape.frame_transfer {
        net.condition(&frame_transfer_obs(obs, obs.current_state().position), [0.0; 3])?
    } else {
        net.condition(obs, obs.current_state().position)?
    };
    let mut batch = LowBatch::default();
    for _ in 0..3 {
        let a0 = normals(net.action_dim(), rng);
        let e = normals(net.action_dim(), rng);
        let k = rng.gen_range(1..=net.sched.steps());
        let ak = net.sched.forward(&a0, k, &e)?;
        net.input_row(&ak, &cond, k, &mut batch.rows);
        batch.a0.extend(a0);
        batch.noise.extend(e);
        batch.ks.push(k);
    }

    let high_loss = |store: &ParamStore| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let l = model.high.loss(&mut tape, store, obs, target)?;
        let mut g = store.zero_grads();
        store.accumulate(&tape, &tape.backward(l)?, 1.0, &mut g);
        Ok((tape.value(l)[0], g))
    };
    let low_loss = |store: &ParamStore| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let l = net.loss(&mut tape, store, &batch)?;
        let mut g = store.zero_grads();
        store.accumulate(&tape, &tape.backward(l)?, 1.0, &mut g);
        Ok((tape.value(l)[0], g))
    };
    let (_, gh) = high_loss(&model.store)?;
    let (_, gl) = low_loss(&model.store)?;

    let blocks = model.store.len();
    let mut store = model.store.clone();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let b = j % blocks;
        let i = rng.gen_range(0..store.values[b].len());
        let is_high = store.infos[b].name.starts_with("high.");
        let analytic = if is_high { gh[b][i] } else { gl[b][i] };
        let w = store.values[b][i];
        let h = 1e-3 * w.abs().max(1.0);
        let eval = |store: &ParamStore| -> Result<f64> {
            if is_high {
                let mut tape = Tape::<f64>::new();
                let l = model.high.loss(&mut tape, store, obs, target)?;
                Ok(tape.value(l)[0])
            } else {
                let mut tape = Tape::<f64>::new();
                let l = net.loss(&mut tape, store, &batch)?;
                Ok(tape.value(l)[0])
            }
        };
        let mut at = |d: f64| -> Result<f64> {
            store.values[b][i] = w + d;
            let v = eval(&store);
            store.values[b][i] = w;
            v
        };
        // Fourth-order central stencil.
        let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(Check::new("gradients", worst, GRAD_TOL))
}

/// Reverse-mode and central-difference gradients of a scalar function of
/// one input tensor of the given shape. Returns `(analytic, numeric)`.
pub fn finite_difference<T: Real>(
    f: impl Fn(&mut Tape<T>, crate::equinet::tape::NodeId) -> crate::equinet::tape::NodeId,
    x: &[f64],
    shape: &[usize],
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::<T>::new();
    let xi = tape.param(0, cast(x), shape.to_vec());
    let l = f(&mut tape, xi);
    let g = tape.backward(l)?;
    let analytic = g.get(xi).map(uncast).unwrap_or_else(|| vec![0.0; x.len()]);
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let at = |d: f64| {
            let mut xs = x.to_vec();
            xs[i] += d;
            let mut tape = Tape::<T>::new();
            let xi = tape.param(0, cast(&xs), shape.to_vec());
            let l = f(&mut tape, xi);
            uncast(tape.value(l))[0]
        };
        numeric.push((at(h) - at(-h)) / (2.0 * h));
    }
    Ok((analytic, numeric))
}
