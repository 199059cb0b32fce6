mod common;

use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panomesh::formats::{checkpoint_from_bytes, checkpoint_to_bytes, DepthMap};
use panomesh::loss::{berhu, evaluate, DepthRange, MetricsInput};
use panomesh::mesh::{normalize, AdjacencyCache, MeshHierarchy, SphericalMesh};
use panomesh::mesh_ops::{mesh_conv, mesh_max_pool, mesh_unpool, MeshConvParams, MeshFeature};
use panomesh::net::{gate_fuse, FusionVariant, Gates, NetworkConfig};
use panomesh::projection::{
    build_projection_table, lonlat_to_pixel, pixel_to_lonlat, pointcloud_from_equirect,
    EquirectGrid, ProjectionTable,
};
use panomesh::tensor::{GatherIndex, Parameters, Tape, Tensor};

use common::{naive_mesh_conv, reference_metrics};

fn mesh(mr: usize) -> Arc<SphericalMesh> {
    static CACHE: OnceLock<(MeshHierarchy, AdjacencyCache)> = OnceLock::new();
    let (h, c) = CACHE.get_or_init(|| (MeshHierarchy::new(), AdjacencyCache::new()));
    c.get_mesh(h, mr)
}

fn table() -> &'static ProjectionTable {
    static TABLE: OnceLock<ProjectionTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        build_projection_table(EquirectGrid::new(32, 16).unwrap(), &MeshHierarchy::new(), 2).unwrap()
    })
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, len)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn faf_invariants_through_mr6() {
    for mr in 0..=6 {
        mesh(mr).check_invariants().unwrap();
    }
}

#[test]
fn locate_agrees_with_exhaustive_containment() {
    let hierarchy = MeshHierarchy::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ties = 0;
    for (mr, samples) in [(0, 500), (1, 500), (2, 1000), (3, 1000), (4, 2000), (5, 10_000)] {
        let level = hierarchy.level(mr);
        let locator = hierarchy.locator(mr);
        for _ in 0..samples {
            let d = normalize([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let found = locator.locate(d).unwrap();
            let containing: Vec<usize> =
                (0..level.face_count()).filter(|&f| level.contains(f, d)).collect();
            assert!(containing.contains(&found), "mr {mr}: {found} not in {containing:?}");
            if containing.len() > 1 {
                ties += 1;
            } else {
                assert_eq!(containing, [found]);
            }
        }
    }
    assert!(ties < 10, "{ties} edge ties");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_lonlat_inverse(u in 0.0..1024.0f64, v in 0.0..=512.0f64) {
        let grid = EquirectGrid::new(1024, 512).unwrap();
        let ll = pixel_to_lonlat(&grid, u, v).unwrap();
        let (u2, v2) = lonlat_to_pixel(&grid, ll);
        prop_assert!((u - u2).abs() < 1e-9, "{u} -> {u2}");
        prop_assert!((v - v2).abs() < 1e-9, "{v} -> {v2}");
    }

    #[test]
    fn e2s_is_linear_and_convex(
        a in values(512), b in values(512), s in -3.0..3.0f64, t in -3.0..3.0f64,
    ) {
        let table = table();
        let img = |v: &[f64]| Tensor::new([16, 32, 1], v.to_vec()).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + t * y).collect();
        let fa = table.e2s_resample(&img(&a)).unwrap();
        let fb = table.e2s_resample(&img(&b)).unwrap();
        let fc = table.e2s_resample(&img(&combo)).unwrap();
        let expected: Vec<f64> = fa.data().iter().zip(fb.data()).map(|(x, y)| s * x + t * y).collect();
        prop_assert!(close(fc.data(), &expected, 1e-12));
        let (lo, hi) = a.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        prop_assert!(fa.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }

    #[test]
    fn s2e_is_linear_and_selects(a in values(320), b in values(320), s in -3.0..3.0f64) {
        let table = table();
        let faces = |v: &[f64]| Tensor::new([320, 1], v.to_vec()).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + y).collect();
        let ia = table.s2e_resample(&faces(&a)).unwrap();
        let ib = table.s2e_resample(&faces(&b)).unwrap();
        let ic = table.s2e_resample(&faces(&combo)).unwrap();
        let expected: Vec<f64> = ia.data().iter().zip(ib.data()).map(|(x, y)| s * x + y).collect();
        prop_assert_eq!(ic.data(), &expected[..]);
        prop_assert!(ia.data().iter().all(|x| a.contains(x)));
    }

    #[test]
    fn resamplers_keep_constants(c in -10.0..10.0f64) {
        let table = table();
        let faces = table.e2s_resample(&Tensor::full([16, 32, 2], c)).unwrap();
        prop_assert!(faces.data().iter().all(|&x| x == c));
        let image = table.s2e_resample(&Tensor::full([320, 2], c)).unwrap();
        prop_assert!(image.data().iter().all(|&x| x == c));
    }

    #[test]
    fn pointcloud_norms_match(d in prop::collection::vec(0.05..20.0f64, 128)) {
        let grid = EquirectGrid::new(16, 8).unwrap();
        let cloud = pointcloud_from_equirect(&grid, &d, None).unwrap();
        prop_assert_eq!(cloud.len(), 128);
        for (p, &r) in cloud.points.iter().zip(&d) {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            prop_assert!((n - r).abs() <= 1e-9 * r);
        }
    }

    #[test]
    fn gather_scatter_adjoint(
        idx in prop::collection::vec(0usize..7, 12),
        x in values(7 * 2),
        y in values(12 * 2),
    ) {
        let index = GatherIndex::new(idx, 3).unwrap();
        let tape = Tape::new();
        let gx = tape.constant(Tensor::new([7, 2], x.clone()).unwrap()).gather(&index).unwrap();
        let sy = tape.constant(Tensor::new([4, 3, 2], y.clone()).unwrap()).scatter_add(&index, 7).unwrap();
        let lhs = gx.value().dot(&Tensor::new([4, 3, 2], y).unwrap());
        let rhs = Tensor::new([7, 2], x).unwrap().dot(&sy.value());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn mesh_conv_superposition(
        x1 in values(80 * 2), x2 in values(80 * 2),
        w1 in values(8 * 3), w2 in values(8 * 3), b1 in values(3), b2 in values(3),
        s in -2.0..2.0f64,
    ) {
        let m = mesh(1);
        let conv = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let p = MeshConvParams::from_blocks(
                [0, 1, 2, 3].map(|k| Tensor::new([2, 3], w[k * 6..k * 6 + 6].to_vec()).unwrap()).each_ref(),
                Tensor::new([3], b.to_vec()).unwrap(),
            ).unwrap().bind(&tape, false);
            let f = MeshFeature::new(1, tape.constant(Tensor::new([80, 2], x.to_vec()).unwrap())).unwrap();
            mesh_conv(f, &p, &m).unwrap().values().value().data().to_vec()
        };
        let zero = vec![0.0; 3];
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p + s * q).collect::<Vec<_>>();
        // Linear in features for a fixed bias-free kernel.
        let lhs = conv(&mix(&x1, &x2), &w1, &zero);
        let rhs = mix(&conv(&x1, &w1, &zero), &conv(&x2, &w1, &zero));
        prop_assert!(close(&lhs, &rhs, 1e-12));
        // Linear in the parameters for fixed features.
        let lhs = conv(&x1, &mix(&w1, &w2), &mix(&b1, &b2));
        let rhs = mix(&conv(&x1, &w1, &b1), &conv(&x1, &w2, &b2));
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn mesh_conv_matches_naive_oracle(mr in 0usize..=2, seed in any::<u64>(), symmetric in any::<bool>()) {
        let m = mesh(mr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = m.face_count();
        let (c_in, c_out) = (3, 2);
        let x: Vec<f64> = (0..f * c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut blocks: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_fn([c_in, c_out], |_| rng.random_range(-1.0..1.0)))
            .collect();
        if symmetric {
            blocks[2] = blocks[1].clone();
            blocks[3] = blocks[1].clone();
        }
        let bias = Tensor::from_fn([c_out], |_| rng.random_range(-1.0..1.0));
        let params = MeshConvParams::from_blocks(
            [&blocks[0], &blocks[1], &blocks[2], &blocks[3]],
            bias.clone(),
        ).unwrap();
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        let feat = MeshFeature::new(mr, tape.constant(Tensor::new([f, c_in], x.clone()).unwrap())).unwrap();
        let out = mesh_conv(feat, &vars, &m).unwrap().values().value().data().to_vec();
        let weight: Vec<f64> = blocks.iter().flat_map(|b| b.data().to_vec()).collect();
        let oracle = naive_mesh_conv(&m, &x, c_in, &weight, bias.data(), |_| [0, 1, 2]);
        prop_assert!(close(&out, &oracle, 1e-12));
        if symmetric {
            let perms = [[1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]];
            let shuffled = naive_mesh_conv(&m, &x, c_in, &weight, bias.data(), |face| perms[face % 5]);
            prop_assert!(close(&out, &shuffled, 1e-12));
        }
    }

    #[test]
    fn pool_unpool_algebra(x in values(320 * 2)) {
        let tape = Tape::new();
        let coarse = MeshFeature::new(1, tape.constant(Tensor::new([80, 2], x[..160].to_vec()).unwrap())).unwrap();
        let back = mesh_max_pool(mesh_unpool(coarse).unwrap()).unwrap();
        prop_assert_eq!(back.values().value().data().to_vec(), x[..160].to_vec());
        let fine = MeshFeature::new(2, tape.constant(Tensor::new([320, 2], x).unwrap())).unwrap();
        let up = mesh_unpool(mesh_max_pool(fine).unwrap()).unwrap();
        prop_assert_eq!(up.values().shape(), vec![320, 2]);
    }

    #[test]
    fn gate_identities_hold(a in values(80 * 3), b in values(80 * 3)) {
        let m = mesh(1);
        let tape = Tape::new();
        let zero = MeshConvParams::zeros(6, 3).bind(&tape, false);
        let sp = MeshFeature::new(1, tape.constant(Tensor::new([80, 3], a.clone()).unwrap())).unwrap();
        let eq = MeshFeature::new(1, tape.constant(Tensor::new([80, 3], b.clone()).unwrap())).unwrap();
        let keep_sp = gate_fuse(sp, eq, &zero, &zero, &m, Gates::Fixed(1.0, 0.0)).unwrap();
        prop_assert_eq!(keep_sp.values().value().data().to_vec(), a.clone());
        let keep_eq = gate_fuse(sp, eq, &zero, &zero, &m, Gates::Fixed(0.0, 1.0)).unwrap();
        prop_assert_eq!(keep_eq.values().value().data().to_vec(), b.clone());
        let mean = gate_fuse(sp, eq, &zero, &zero, &m, Gates::Learned).unwrap();
        let expected: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
        prop_assert_eq!(mean.values().value().data().to_vec(), expected);
    }

    #[test]
    fn berhu_symmetric_convex_continuous(
        y in -5.0..5.0f64, d1 in -3.0..3.0f64, d2 in -3.0..3.0f64, lambda in 0.0..1.0f64,
        t in 0.01..2.0f64,
    ) {
        prop_assert_eq!(berhu(y, y + d1, t), berhu(y + d1, y, t));
        let f = |d: f64| berhu(0.0, d, t);
        prop_assert_eq!(f(d1), f(-d1));
        let mid = f(lambda * d1 + (1.0 - lambda) * d2);
        prop_assert!(mid <= lambda * f(d1) + (1.0 - lambda) * f(d2) + 1e-12);
        prop_assert_eq!(f(t), t);
        prop_assert!((f(t * (1.0 + 1e-9)) - t).abs() < 1e-8 * (1.0 + t));
    }

    #[test]
    fn metrics_match_reference_and_scale(
        gt in prop::collection::vec(0.0..12.0f64, 1..60),
        noise in prop::collection::vec(0.5..2.0f64, 60),
        k in 0.1..10.0f64,
    ) {
        let pr: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| (g * n).max(1e-3)).collect();
        let wide = DepthRange::new(0.05, 1e6).unwrap();
        let reference = reference_metrics(&gt, &pr, 0.05, 1e6);
        let report = evaluate(MetricsInput { gt: &gt, pr: &pr, range: wide });
        let Some(reference) = reference else {
            prop_assert!(report.is_err());
            return Ok(());
        };
        let r = report.unwrap();
        let got = [r.mae, r.mre, r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3];
        prop_assert!(close(&got, &reference, 1e-12), "{got:?} vs {reference:?}");
        prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);

        let gs: Vec<f64> = gt.iter().map(|g| g * k).collect();
        let ps: Vec<f64> = pr.iter().map(|p| p * k).collect();
        let wide_scaled = DepthRange::new(0.05 * k, 1e6 * k).unwrap();
        let s = evaluate(MetricsInput { gt: &gs, pr: &ps, range: wide_scaled }).unwrap();
        prop_assert_eq!(s.n, r.n);
        prop_assert!((s.mre - r.mre).abs() <= 1e-12 * (1.0 + r.mre));
        prop_assert!((s.mae - k * r.mae).abs() <= 1e-12 * (1.0 + k * r.mae));
        prop_assert!((s.rmse - k * r.rmse).abs() <= 1e-12 * (1.0 + k * r.rmse));
        prop_assert!((s.rmse_log - r.rmse_log).abs() <= 1e-9);
        // A ratio sitting within rounding of a threshold may flip; allow one.
        for (a, b) in [(s.delta1, r.delta1), (s.delta2, r.delta2), (s.delta3, r.delta3)] {
            prop_assert!((a - b).abs() <= 1.0 / r.n as f64 + 1e-15);
        }
    }

    #[test]
    fn config_text_round_trip(
        k in 1usize..4, base in 2usize..6, fusion in 0usize..5, seed in any::<u64>(),
        lr in 0.0..1.0f64, extra in 0usize..2,
    ) {
        let channels: Vec<usize> = (0..k).map(|i| 4 << i).collect();
        let mut decoder: Vec<usize> = channels.iter().rev().copied().collect();
        decoder.extend(std::iter::repeat_n(4, extra));
        let scales = decoder.len();
        let cfg = NetworkConfig {
            image_h: 8 << k,
            image_w: 16 << k,
            mr_hi: base + k - 1,
            mr_lo: base,
            channels,
            decoder_channels: decoder,
            extra_levels: extra,
            fusion: FusionVariant::ALL[fusion],
            scales,
            loss_weights: (0..scales).map(|i| 0.5 + i as f64).collect(),
            lr,
            seed,
        };
        cfg.validate().unwrap();
        prop_assert_eq!(NetworkConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn depth_and_checkpoint_round_trip(
        h in 1usize..6, w in 1usize..6, raw in prop::collection::vec(any::<f64>(), 36),
    ) {
        let data: Vec<f32> = raw[..h * w].iter().map(|&x| x as f32).collect();
        let map = DepthMap::new(h, w, data).unwrap();
        let back = DepthMap::from_bytes(&map.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(
            back.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            map.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let mut params = Parameters::new();
        params.insert("w", Tensor::new([h, w], raw[..h * w].to_vec()).unwrap());
        params.insert("b", Tensor::new([w], raw[..w].to_vec()).unwrap());
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&params).unwrap()).unwrap();
        for ((_, a), (_, b)) in params.iter().zip(back.iter()) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert_eq!(
                a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
