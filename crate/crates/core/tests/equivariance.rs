use hep_core::audit::{self, inner_cloud, roll};
use hep_core::config::RunConfig;
use hep_core::env::POINT_FEATURES;
use hep_core::equinet::layers::{EqConv3d, EqLinear};
use hep_core::equinet::rep::{Block, Rep};
use hep_core::equinet::tape::Padding;
use hep_core::equinet::{ParamStore, Tape};
use hep_core::group::{compose, inverse, rep_matrix, GroupElement, RepSpec};
use hep_core::high_level::select_keypose;
use hep_core::lattice::{snap3, snap_sensor3};
use hep_core::model::Model;
use hep_core::scene::PointCloud;
use hep_core::voxel::{partition, rasterize, RasterMode, VoxelGridSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn model() -> &'static (RunConfig, Model) {
    static M: OnceLock<(RunConfig, Model)> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = RunConfig::default();
        let m = Model::build(&cfg).unwrap();
        (cfg, m)
    })
}

fn lattice3() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-0.5f64..0.5).prop_map(snap3)
}

fn element(u: u32) -> impl Strategy<Value = GroupElement> {
    (lattice3(), 0..u).prop_map(move |(t, m)| GroupElement { t, m, u })
}

fn dense_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn point_action_is_a_group_action(g1 in element(4), g2 in element(4), p in lattice3()) {
        let g21 = compose(&g2, &g1).unwrap();
        prop_assert_eq!(g21.act_position(p), g2.act_position(g1.act_position(p)));
        prop_assert_eq!(compose(&inverse(&g1), &g1).unwrap().act_position(p), p);
    }

    #[test]
    fn rep_matrices_compose(g1 in element(8), g2 in element(8), n0 in 0usize..3, n1 in 0usize..3, nr in 1usize..3) {
        let spec = RepSpec::new(n0, n1, nr, 8).unwrap();
        let lhs = rep_matrix(&spec, &compose(&g2, &g1).unwrap()).unwrap();
        let rhs = dense_mul(&rep_matrix(&spec, &g2).unwrap(), &rep_matrix(&spec, &g1).unwrap());
        for (a, b) in lhs.iter().flatten().zip(rhs.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn voxelmap_action_composes(seed in any::<u64>(), m1 in 0u32..4, m2 in 0u32..4) {
        let spec = VoxelGridSpec::centered(0.0625, [8, 8, 8], 0.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = inner_cloud(&spec, &mut rng);
        let v = rasterize(&cloud, &spec, RasterMode::MeanFeature, 4).unwrap();
        let (g1, g2) = (GroupElement::rotation(m1, 4).unwrap(), GroupElement::rotation(m2, 4).unwrap());
        let lhs = compose(&g2, &g1).unwrap().act_voxelmap(&v).unwrap();
        let rhs = g2.act_voxelmap(&g1.act_voxelmap(&v).unwrap()).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn partition_commutes_with_rotation(seed in any::<u64>(), m in 0u32..4) {
        // Retained points must be the rotated retained points, even when
        // voxels overflow.
        let spec = VoxelGridSpec::centered(0.0625, [8, 8, 8], 0.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = inner_cloud(&spec, &mut rng);
        let g = GroupElement::rotation(m, 4).unwrap();
        let moved = partition(&g.act_cloud(&cloud), &spec);
        let base = partition(&cloud, &spec);
        prop_assert_eq!(moved.retained(), base.retained());
        let mut a: Vec<[u64; 3]> = moved.voxels.iter().flat_map(|v| v.points.iter().map(|p| p.position.map(f64::to_bits))).collect();
        let mut b: Vec<[u64; 3]> = base.voxels.iter().flat_map(|v| v.points.iter().map(|p| g.act_position(p.position).map(f64::to_bits))).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn stacked_voxel_map_is_equivariant(seed in any::<u64>()) {
        let (_, model) = model();
        let pn = model.high.stacked_encoder().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clouds = [inner_cloud(&model.high.spec, &mut rng)];
        let c = audit::stacked_voxel::<f64>(pn, &model.store, &model.high.spec, &clouds, 1e-10).unwrap();
        prop_assert!(c.pass, "{:?}", c);
    }

    #[test]
    fn tied_linear_is_equivariant(seed in any::<u64>(), n_in in 1usize..4, n_std in 0usize..3, n_out in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = vec![Block::Regular; n_in];
        blocks.extend(std::iter::repeat(Block::Standard).take(n_std));
        blocks.push(Block::Trivial);
        let in_rep = Rep::from_blocks(&blocks, 4).unwrap();
        let out_rep = Rep::from_blocks(&[vec![Block::Regular; n_out], vec![Block::Standard, Block::Trivial]].concat(), 4).unwrap();
        let mut store = ParamStore::new();
        let l = EqLinear::new(&mut store, "l", in_rep.clone(), out_rep.clone(), true, true, 1.0, &mut rng).unwrap();
        for b in &mut store.values {
            for v in b.iter_mut() {
                *v += rand::Rng::gen_range(&mut rng, -1.0..1.0);
            }
        }
        let x: Vec<f64> = (0..in_rep.dim()).map(|i| ((i * 7 + 3) as f64).sin()).collect();
        let run = |x: &[f64]| {
            let mut t = Tape::<f64>::new();
            let xi = t.constant(x.to_vec(), vec![1, in_rep.dim()]);
            let y = l.forward(&mut t, &store, xi).unwrap();
            t.value(y).to_vec()
        };
        let y = run(&x);
        for m in 0..4 {
            let lhs = run(&in_rep.apply(m, &x));
            let rhs = out_rep.apply(m, &y);
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frame_transfer_identities_hold_exactly(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = audit::frame_transfer_laws(5, &mut rng).unwrap();
        prop_assert_eq!(c.max_residual, 0.0);
    }
}

#[test]
fn conv_is_equivariant_to_rotation_and_circular_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [4, 4, 4];
    let in_rep = Rep::from_blocks(&[Block::Regular, Block::Standard, Block::Trivial], 4).unwrap();
    let out_rep = Rep::regular(2, 4);
    let mut store = ParamStore::new();
    let c = EqConv3d::new(&mut store, "c", in_rep.clone(), out_rep.clone(), 3, 2, Padding::Circular, true, true, 1.0, &mut rng)
        .unwrap();
    let cells = 64;
    let x: Vec<f64> = (0..in_rep.dim() * cells).map(|i| ((i * 13 + 1) as f64).sin()).collect();
    let run = |x: &[f64]| {
        let mut t = Tape::<f64>::new();
        let xi = t.constant(x.to_vec(), vec![in_rep.dim(), cells]);
        let y = c.forward(&mut t, &store, xi, dims).unwrap();
        t.value(y).to_vec()
    };
    let y = run(&x);
    let (gi, go) = (Rep::grid(dims, &in_rep).unwrap(), Rep::grid(dims, &out_rep).unwrap());
    for m in 0..4 {
        let d = run(&gi.apply(m, &x)).iter().zip(go.apply(m, &y)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "m = {m}: {d}");
    }
    let shifted = run(&roll(&x, dims, [1, -1, 2]));
    assert_eq!(shifted, roll(&y, dims, [1, -1, 2]));
}

#[test]
fn untied_layers_break_symmetry() {
    let mut cfg = RunConfig::default();
    cfg.ablation = hep_core::config::Ablation::NoEqui;
    let model = Model::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let checks = audit::layer_checks(&model, &mut rng).unwrap();
    for name in ["layer.linear", "layer.conv", "layer.unet", "layer.eps"] {
        let c = checks.iter().find(|c| c.name == name).unwrap();
        assert!(!c.pass && c.max_residual > 1e-3, "{c:?}");
    }
}

#[test]
fn heatmap_argmax_follows_rotations() {
    let (cfg, model) = model();
    let scenes = audit::audit_scenes(cfg, 6, 4).unwrap();
    let mut unique = 0;
    for o in &scenes {
        let hm = model.high.heatmap(&model.store, o).unwrap();
        if hm.margin() <= 1e-3 {
            continue;
        }
        unique += 1;
        let k = select_keypose(&hm);
        for m in 1..4 {
            let g = GroupElement::rotation(m, 4).unwrap();
            let ghm = model.high.heatmap(&model.store, &g.act_observation(o).unwrap()).unwrap();
            assert_eq!(select_keypose(&ghm), g.act_position(k));
        }
    }
    assert!(unique > 0);
}

#[test]
fn rasterized_grid_of_a_single_point() {
    let spec = VoxelGridSpec::centered(0.0625, [8, 8, 8], 0.0, 6).unwrap();
    let p = snap_sensor3([0.01, -0.07, 0.2]);
    let cloud = PointCloud::from_parts(POINT_FEATURES, vec![p], vec![0.25, 0.5, 1.0]).unwrap();
    let occ = rasterize(&cloud, &spec, RasterMode::Occupancy, 4).unwrap();
    let idx = spec.world_to_index(p).unwrap();
    assert_eq!(idx, [4, 2, 3]);
    assert_eq!(occ.data.iter().sum::<f64>(), 1.0);
    assert_eq!(occ.get(0, spec.linear(idx)), 1.0);
}
