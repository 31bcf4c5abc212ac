use std::sync::OnceLock;

use nalgebra::{Rotation3, Vector2, Vector3};
use proptest::prelude::*;

use vidpoint::camsolve::{evaluate_pairs, gauge_align, prepare_pairs, DepthSampler, PairSet, PoseSolveConfig};
use vidpoint::cli::{GpmContainer, Tensor, TensorData};
use vidpoint::geom::{derive_normals, project, unproject, FrameGrid, FrameStack, Intrinsics, PointMap, PoseSE3, ValidMask};
use vidpoint::loss::loss_multiscale;
use vidpoint::metrics::{
    align_scale_points, align_scale_shift_depth, align_scale_shift_disparity, eval_depth_at, eval_points,
    eval_points_at, evaluate_points, PointAlignment,
};
use vidpoint::repr::{decode_cuboid, decode_decoupled, encode_cuboid, encode_decoupled};
use vidpoint::synth::{make_tracks, render, Rendered, SceneSpec};

fn grid() -> impl Strategy<Value = FrameGrid> {
    (2usize..9, 2usize..9).prop_map(|(w, h)| FrameGrid::new(w, h).unwrap())
}

/// Random point map in front of the camera plus a mask with at least one
/// valid pixel.
fn clip() -> impl Strategy<Value = (PointMap, ValidMask)> {
    (grid(), 1usize..3).prop_flat_map(|(g, t)| {
        let n = t * g.pixels();
        (
            prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.5f64..8.0), n),
            prop::collection::vec(prop::bool::weighted(0.8), n),
        )
            .prop_map(move |(pts, mut valid)| {
                valid[0] = true;
                let pts = pts.into_iter().map(|(x, y, z)| Vector3::new(x, y, z)).collect();
                (
                    FrameStack::from_vec(t, g, pts).unwrap(),
                    ValidMask::from_bools(t, g, &valid).unwrap(),
                )
            })
    })
}

/// Points that are genuinely pinhole projections with one focal per frame.
fn pinhole_clip() -> impl Strategy<Value = (PointMap, ValidMask)> {
    (grid(), 1usize..3, 0.5f64..100.0).prop_flat_map(|(g, t, f)| {
        prop::collection::vec(0.1f64..50.0, t * g.pixels()).prop_map(move |z| {
            let k = Intrinsics::new(f).unwrap();
            let pts = FrameStack::from_fn(t, g, |tt, v, u| {
                let d = z[(tt * g.height + v) * g.width + u];
                unproject(&Vector2::new(u as f64, v as f64), d, &k, g).unwrap()
            });
            (pts, ValidMask::all_valid(t, g))
        })
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn project_unproject_round_trip(
        u in -50.0f64..150.0, v in -50.0f64..150.0, z in 1e-3f64..1e3, f in 0.1f64..1e3,
        w in 1usize..200, h in 1usize..200,
    ) {
        let g = FrameGrid::new(w, h).unwrap();
        let k = Intrinsics::new(f).unwrap();
        let p = unproject(&Vector2::new(u, v), z, &k, g).unwrap();
        let (px, d) = project(&p, &k, g).unwrap();
        prop_assert!((px.x - u).abs() <= 1e-9 * (1.0 + u.abs()));
        prop_assert!((px.y - v).abs() <= 1e-9 * (1.0 + v.abs()));
        prop_assert!(rel(d, z) < 1e-12);
    }

    #[test]
    fn cuboid_and_decoupled_round_trip((pts, mask) in pinhole_clip()) {
        let back = decode_cuboid(&encode_cuboid(&pts, &mask).unwrap()).unwrap();
        let (dec, _) = encode_decoupled(&pts, &mask).unwrap();
        let back2 = decode_decoupled(&dec, pts.grid()).unwrap();
        for i in 0..pts.len() {
            let n = pts.data()[i].norm();
            prop_assert!((back.data()[i] - pts.data()[i]).norm() <= 1e-9 * n);
            prop_assert!((back2.data()[i] - pts.data()[i]).norm() <= 1e-9 * n);
        }
    }

    #[test]
    fn normals_ignore_global_scale((pts, mask) in clip(), s in 1e-3f64..1e3) {
        let a = derive_normals(&pts, &mask).unwrap();
        let b = derive_normals(&pts.map(|p| p * s), &mask).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).norm() < 1e-9),
                (None, None) => {}
                _ => prop_assert!(false, "definedness changed under scaling"),
            }
        }
    }

    #[test]
    fn point_metrics_scale_invariant((pts, mask) in clip(), noise in 0.0f64..0.3, s in 1e-3f64..1e3) {
        // prediction = ground truth with a deterministic per-pixel perturbation
        let pred = FrameStack::from_fn(pts.frames(), pts.grid(), |t, v, u| {
            let i = pts.index(t, v, u);
            pts.data()[i] * (1.0 + noise * ((i as f64 * 0.7).sin()))
        });
        let a = evaluate_points(&pred, &pts, &mask, PointAlignment::Scale).unwrap().points.unwrap();
        let b = evaluate_points(&pred.map(|p| p * s), &pts, &mask, PointAlignment::Scale).unwrap().points.unwrap();
        prop_assert!((a.rel_p - b.rel_p).abs() < 1e-7 * (1.0 + a.rel_p));
        prop_assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn point_metrics_permutation_invariant((pts, mask) in clip(), noise in 0.0f64..0.5, shift in 1usize..97) {
        let pred = pts.map(|p| p * (1.0 + noise) + Vector3::new(noise, 0.0, 0.0));
        let a = eval_points(&pred, &pts, &mask).unwrap();
        // rotate every array by the same offset: pixels keep their pairing
        let n = pts.len();
        let roll = |v: &[Vector3<f64>]| (0..n).map(|i| v[(i + shift) % n]).collect::<Vec<_>>();
        let flags: Vec<bool> = (0..n).map(|i| mask.is_valid((i + shift) % n)).collect();
        let p2 = FrameStack::from_vec(pts.frames(), pts.grid(), roll(pred.data())).unwrap();
        let g2 = FrameStack::from_vec(pts.frames(), pts.grid(), roll(pts.data())).unwrap();
        let m2 = ValidMask::from_bools(pts.frames(), pts.grid(), &flags).unwrap();
        let b = eval_points(&p2, &g2, &m2).unwrap();
        prop_assert!((a.rel_p - b.rel_p).abs() < 1e-9);
        prop_assert_eq!(a.delta_p, b.delta_p);
    }

    #[test]
    fn inlier_ratio_monotone_in_threshold((pts, mask) in clip(), noise in 0.0f64..1.0, lo in 0.0f64..1.0, gap in 0.0f64..1.0) {
        let pred = FrameStack::from_fn(pts.frames(), pts.grid(), |t, v, u| {
            let i = pts.index(t, v, u);
            pts.data()[i] * (1.0 + noise * ((i as f64).cos()))
        });
        let a = eval_points_at(&pred, &pts, &mask, lo).unwrap();
        let b = eval_points_at(&pred, &pts, &mask, lo + gap).unwrap();
        prop_assert!(a.delta_p <= b.delta_p);
        let zp = pred.map(|p| p.z);
        let zg = pts.map(|p| p.z);
        let c = eval_depth_at(&zp, &zg, &mask, 1.0 + lo).unwrap();
        let d = eval_depth_at(&zp, &zg, &mask, 1.0 + lo + gap).unwrap();
        prop_assert!(c.delta_d <= d.delta_d);
    }

    #[test]
    fn alignment_never_worse_than_identity((pts, mask) in clip(), s in 0.1f64..10.0, b in -1.0f64..1.0, noise in 0.0f64..0.5) {
        let pred = FrameStack::from_fn(pts.frames(), pts.grid(), |t, v, u| {
            let i = pts.index(t, v, u);
            pts.data()[i] * s * (1.0 + noise * (i as f64 * 1.3).sin())
        });
        let id_obj: f64 = mask.valid_indices().map(|i| (pred.data()[i] - pts.data()[i]).norm_squared()).sum();
        let a = align_scale_points(&pred, &pts, &mask).unwrap();
        prop_assert!(a.objective <= id_obj * (1.0 + 1e-12) + 1e-12);

        let zp = pred.map(|p| p.z + b);
        let zg = pts.map(|p| p.z);
        let id_obj: f64 = mask.valid_indices().map(|i| (zp.data()[i] - zg.data()[i]).powi(2)).sum();
        if let Ok(a) = align_scale_shift_depth(&zp, &zg, &mask) {
            prop_assert!(a.objective <= id_obj * (1.0 + 1e-12) + 1e-12);
        }
        let zp = pred.map(|p| p.z);
        let id_obj: f64 = mask.valid_indices().map(|i| (1.0 / zp.data()[i] - 1.0 / zg.data()[i]).powi(2)).sum();
        if let Ok(a) = align_scale_shift_disparity(&zp, &zg, &mask) {
            prop_assert!(a.objective <= id_obj * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn multiscale_loss_ignores_patch_offsets(
        data in prop::collection::vec((0.1f64..5.0, 0.1f64..5.0, prop::bool::weighted(0.8)), 64),
        offsets in prop::collection::vec(-10.0f64..10.0, 16),
    ) {
        let g = FrameGrid::new(8, 8).unwrap();
        let pred = FrameStack::from_vec(1, g, data.iter().map(|d| d.0).collect()).unwrap();
        let gt = FrameStack::from_vec(1, g, data.iter().map(|d| d.1).collect()).unwrap();
        let mut valid: Vec<bool> = data.iter().map(|d| d.2).collect();
        valid[0] = true;
        let mask = ValidMask::from_bools(1, g, &valid).unwrap();
        let base = loss_multiscale(&pred, &gt, &mask, &[1]).unwrap().value;
        let shifted = pred.map(|z| z + offsets[0]);
        prop_assert!((loss_multiscale(&shifted, &gt, &mask, &[1]).unwrap().value - base).abs() < 1e-12);
        // a constant per α = 2 patch is invisible to that scale and every finer one
        let scales = [2, 4];
        let base = loss_multiscale(&pred, &gt, &mask, &scales).unwrap().value;
        let patched = FrameStack::from_fn(1, g, |_, v, u| pred.get(0, v, u) + offsets[(v / 4) * 2 + u / 4]);
        prop_assert!((loss_multiscale(&patched, &gt, &mask, &scales).unwrap().value - base).abs() < 1e-12);
        let all = [1, 2, 4, 8];
        let base = loss_multiscale(&pred, &gt, &mask, &all).unwrap().value;
        prop_assert!((loss_multiscale(&shifted, &gt, &mask, &all).unwrap().value - base).abs() < 1e-12);
    }

    #[test]
    fn container_round_trip(
        f32s in prop::collection::vec(-1e6f32..1e6, 0..20),
        f64s in prop::collection::vec(prop::num::f64::ANY, 0..20),
        bytes in prop::collection::vec(any::<u8>(), 0..20),
        name in "[a-z_]{1,12}",
    ) {
        let mut c = GpmContainer::new();
        c.put(Tensor::new(format!("{name}_a"), vec![f32s.len() as u64], TensorData::F32(f32s)).unwrap());
        c.put(Tensor::new(format!("{name}_b"), vec![1, f64s.len() as u64], TensorData::F64(f64s)).unwrap());
        c.put(Tensor::new(format!("{name}_c"), vec![bytes.len() as u64, 1], TensorData::U8(bytes)).unwrap());
        let first = c.write();
        let back = GpmContainer::read(&first).unwrap();
        prop_assert_eq!(back.write(), first);
    }
}

struct PoseFixture {
    rendered: Rendered,
    pairs: PairSet,
}

fn pose_fixture() -> &'static PoseFixture {
    static FIX: OnceLock<PoseFixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let g = FrameGrid::new(48, 36).unwrap();
        let spec = SceneSpec::orbit_room(g, 6, 40.0, 0).unwrap();
        let rendered = render(&spec).unwrap();
        let tracks = make_tracks(&spec, 30, 1, 0.3).unwrap().tracks;
        let sampler = DepthSampler {
            points: &rendered.points,
            mask: &rendered.mask,
        };
        let pairs = prepare_pairs(&sampler, &rendered.intrinsics, &tracks, &PoseSolveConfig::default()).unwrap();
        PoseFixture { rendered, pairs }
    })
}

fn pose() -> impl Strategy<Value = PoseSE3> {
    (prop::array::uniform3(-1.0f64..1.0), prop::array::uniform3(-3.0f64..3.0)).prop_map(|(w, t)| {
        PoseSE3::new(Rotation3::new(Vector3::from(w)), Vector3::from(t))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn residuals_are_gauge_invariant(g in pose(), perturb in prop::collection::vec(pose(), 6)) {
        let fix = pose_fixture();
        let r = &fix.rendered;
        // arbitrary trajectory, then the same trajectory in a moved world frame
        let poses: Vec<PoseSE3> = r.poses.iter().zip(&perturb).map(|(p, d)| p.compose(&PoseSE3::new(
            Rotation3::new(d.rotation.scaled_axis() * 0.05),
            d.translation * 0.05,
        ))).collect();
        let moved: Vec<PoseSE3> = poses.iter().map(|p| p.compose(&g)).collect();
        let a = evaluate_pairs(&poses, &r.intrinsics, r.points.grid(), &fix.pairs, 1.0);
        let b = evaluate_pairs(&moved, &r.intrinsics, r.points.grid(), &fix.pairs, 1.0);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert!((a.cost() - b.cost()).abs() <= 1e-8 * (1.0 + a.cost())),
            (a, b) => prop_assert_eq!(a.is_ok(), b.is_ok()),
        }
        let ga = gauge_align(&poses, &poses[0]);
        let gb = gauge_align(&moved, &moved[0]);
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert!(x.rotation_angle_to(y) < 1e-9);
            prop_assert!((x.translation - y.translation).norm() < 1e-9);
        }
    }
}
