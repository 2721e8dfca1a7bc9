use aerocap::body_model::{self, BodyParams, BETA_DIM, NUM_JOINTS, THETA_DIM};
use aerocap::bundle::ModelBundle;
use aerocap::camera::{self, CameraPose, CropParams, Intrinsics};
use aerocap::fusion::codec::{self, StageMessage, BODY_LEN, MESSAGE_LEN};
use aerocap::fusion::matching::{self, TimedFrame};
use aerocap::geom::rot;
use aerocap::losses::{self, CameraView, KeypointObservation, LossWeights};
use aerocap::metrics;
use aerocap::pose_prior::{LatentPose, LATENT_DIM};
use aerocap::rotation::{self, Rotation6D};
use aerocap::synthgen::{FrameRecord, SCHEMA};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-r..r)
}

fn axis() -> impl Strategy<Value = [f64; 3]> {
    vec3(1.0).prop_filter("nonzero axis", |a| rot::norm(a) > 1e-3)
}

fn rotation() -> impl Strategy<Value = rot::Mat3> {
    (axis(), -3.1..3.1f64).prop_map(|(a, t)| rot::axis_angle(a, t))
}

fn six_d() -> impl Strategy<Value = [f64; 6]> {
    prop::array::uniform6(-2.0..2.0f64).prop_filter("non-degenerate", |r| {
        let a = [r[0], r[1], r[2]];
        let b = [r[3], r[4], r[5]];
        let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        rot::norm(&a) > 1e-2 && rot::norm(&c) > 1e-2 * rot::norm(&b).max(1e-12)
    })
}

fn intrinsics() -> impl Strategy<Value = Intrinsics> {
    (500.0..3000.0f64, 500.0..3000.0f64, 200.0..1000.0f64, 200.0..800.0f64).prop_map(|(fx, fy, cx, cy)| Intrinsics {
        fx,
        fy,
        cx,
        cy,
        width: (2.0 * cx) as u32 + 1,
        height: (2.0 * cy) as u32 + 1,
    })
}

fn crop() -> impl Strategy<Value = CropParams> {
    (-0.9..0.9f64, -0.9..0.9f64, 0.2..8.0f64).prop_map(|(bx, by, s)| CropParams { bx, by, s })
}

fn tau() -> impl Strategy<Value = [f64; 3]> {
    (-5.0..5.0f64, -5.0..5.0f64, 0.5..50.0f64).prop_map(|(x, y, z)| [x, y, z])
}

fn body_params() -> impl Strategy<Value = BodyParams> {
    (
        tau(),
        rotation(),
        prop::collection::vec(-0.3..0.3f64, THETA_DIM),
        prop::collection::vec(-1.0..1.0f64, BETA_DIM),
    )
        .prop_map(|(tau, r, dtheta, beta)| {
            let theta = body_model::identity_theta().iter().zip(&dtheta).map(|(a, b)| a + b).collect();
            BodyParams {
                tau,
                phi: Rotation6D::encode(&r).unwrap(),
                theta,
                beta,
            }
        })
}

fn max_abs_diff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn decode_is_a_rotation(r in six_d()) {
        let m = Rotation6D(r).decode().unwrap();
        prop_assert!(rotation::orthonormality_residual(&m) < 1e-9);
        prop_assert!((rotation::det3(&m) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip(r in rotation()) {
        let back = Rotation6D::encode(&r).unwrap().decode().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((back[i][j] - r[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crop_round_trip(t in tau(), p in crop(), k in intrinsics()) {
        let back = camera::crop_to_full(camera::full_to_crop(t, &p, &k).unwrap(), &p, &k).unwrap();
        for i in 0..3 {
            prop_assert!((back[i] - t[i]).abs() < 1e-12, "{back:?} vs {t:?}");
        }
    }

    #[test]
    fn crop_row_identity(t in tau(), p in crop(), k in intrinsics()) {
        let c = camera::full_to_crop(t, &p, &k).unwrap();
        let lhs = k.fx * t[0] / t[2];
        let rhs = k.fx / p.s * c[0] / c[2] + p.bx * k.cx;
        prop_assert!((lhs - rhs).abs() < 1e-9);
        let lhs = k.fy * t[1] / t[2];
        let rhs = k.fy / p.s * c[1] / c[2] + p.by * k.cy;
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn identity_crop_is_exact(t in tau(), k in intrinsics()) {
        prop_assert_eq!(camera::full_to_crop(t, &CropParams::IDENTITY, &k).unwrap(), t);
        prop_assert_eq!(camera::crop_to_full(t, &CropParams::IDENTITY, &k).unwrap(), t);
    }

    #[test]
    fn projection_is_scale_invariant(t in tau(), k in intrinsics(), lambda in 0.01..100.0f64) {
        let a = camera::project(t, &k).unwrap();
        let b = camera::project(t.map(|v| v * lambda), &k).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }

    #[test]
    fn joints_are_rigidly_equivariant(p in body_params(), r in rotation(), t in vec3(3.0)) {
        let tpl = &ModelBundle::builtin().template;
        let base = body_model::joints(&p, tpl).unwrap();
        let moved = BodyParams {
            tau: rot::add(&rot::apply(&r, &p.tau), &t),
            phi: Rotation6D::encode(&rot::mul(&r, &p.phi.decode().unwrap())).unwrap(),
            ..p.clone()
        };
        let expect: Vec<[f64; 3]> = base.iter().map(|j| rot::add(&rot::apply(&r, j), &t)).collect();
        prop_assert!(max_abs_diff(&body_model::joints(&moved, tpl).unwrap(), &expect) < 1e-9);
    }

    #[test]
    fn shape_is_linear_at_rest(
        b1 in prop::collection::vec(-1.0..1.0f64, BETA_DIM),
        b2 in prop::collection::vec(-1.0..1.0f64, BETA_DIM),
    ) {
        let tpl = &ModelBundle::builtin().template;
        let j = |beta: Vec<f64>| body_model::joints(&BodyParams { beta, ..Default::default() }, tpl).unwrap();
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let lhs: Vec<[f64; 3]> = j(sum).iter().zip(&j(b1)).map(|(a, b)| rot::sub(a, b)).collect();
        let rhs: Vec<[f64; 3]> = j(b2).iter().zip(&j(vec![0.0; BETA_DIM])).map(|(a, b)| rot::sub(a, b)).collect();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn latent_round_trip(v in prop::collection::vec(-3.0..3.0f64, LATENT_DIM)) {
        let prior = &ModelBundle::builtin().prior;
        let back = prior.encode(&prior.decode(&LatentPose(v.clone())).unwrap()).unwrap();
        for (a, b) in back.0.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn encoding_is_non_expansive(d in prop::collection::vec(-1.0..1.0f64, THETA_DIM)) {
        let prior = &ModelBundle::builtin().prior;
        let theta: Vec<f64> = body_model::identity_theta().iter().zip(&d).map(|(a, b)| a + b).collect();
        let enc = prior.encode(&theta).unwrap();
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(enc.norm_sq().sqrt() <= dn + 1e-12);
    }

    #[test]
    fn geman_mcclure_even_monotone_bounded(e in 0.0..1e4f64, de in 0.0..1e3f64, sigma in 0.1..500.0f64) {
        let g = losses::geman_mcclure(e, sigma);
        prop_assert_eq!(g, losses::geman_mcclure(-e, sigma));
        prop_assert!(losses::geman_mcclure(e + de, sigma) >= g);
        prop_assert!(g <= sigma * sigma);
    }

    #[test]
    fn j2d_scales_with_confidence(p in body_params(), lambda in 0.0..1.0f64, seed in 0u64..1000) {
        let m = ModelBundle::builtin();
        let p = BodyParams { tau: [p.tau[0], p.tau[1], p.tau[2] + 5.0], ..p };
        let k = Intrinsics::default();
        let kp: Vec<[f64; 2]> = (0..NUM_JOINTS)
            .map(|j| [900.0 + ((seed + j as u64) % 13) as f64 * 10.0, 500.0 + (j as f64) * 3.0])
            .collect();
        let obs = KeypointObservation { keypoints: kp, confidence: vec![0.8; NUM_JOINTS] };
        let view = CameraView { intrinsics: k, crop: CropParams::IDENTITY };
        let w = LossWeights { j2d: 1.0, ..Default::default() };
        let a = losses::loss_finetune_baseline(&m.template, &m.prior, &p, &obs, &view, &w).unwrap().total;
        let b = losses::loss_finetune_baseline(&m.template, &m.prior, &p, &obs.scaled_confidence(lambda), &view, &w)
            .unwrap()
            .total;
        prop_assert!((b - lambda * a).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn matching_respects_tolerance(
        a in prop::collection::vec(0u64..10_000_000, 0..40),
        b in prop::collection::vec(0u64..10_000_000, 0..40),
        tol in 0.0..20.0f64,
    ) {
        let stream = |agent: usize, mut t: Vec<u64>| {
            t.sort_unstable();
            t.into_iter()
                .enumerate()
                .map(|(i, ts)| TimedFrame {
                    agent_id: agent,
                    shutter_timestamp: ts * 100,
                    payload: FrameRecord {
                        schema: SCHEMA.into(),
                        frame_id: i as u64,
                        shutter_timestamp: ts * 100,
                        cameras: vec![],
                        ground_truth: BodyParams::default(),
                    },
                })
                .collect::<Vec<_>>()
        };
        let (sa, sb) = (stream(0, a), stream(1, b));
        let m = matching::match_frames(&sa, &sb, tol).unwrap();
        let tol_ns = (tol * 1e6).round() as u64;
        for &(i, j) in &m.pairs {
            prop_assert!(sa[i].shutter_timestamp.abs_diff(sb[j].shutter_timestamp) <= tol_ns);
        }
        prop_assert_eq!(m.pairs.len() + m.unmatched[0].len(), sa.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched[1].len(), sb.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn codec_round_trip_is_bit_exact(
        frame_id in any::<u64>(),
        stage in 0u8..2,
        theta in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), THETA_DIM),
        beta in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), BETA_DIM),
    ) {
        let m = StageMessage { frame_id, stage, theta, beta };
        let bytes = codec::encode_message(&m).unwrap();
        prop_assert_eq!(bytes.len(), MESSAGE_LEN);
        prop_assert_eq!(codec::body(&bytes).len(), BODY_LEN);
        let back = codec::decode_message(&bytes).unwrap();
        prop_assert_eq!(back.frame_id, m.frame_id);
        prop_assert_eq!(back.stage, m.stage);
        prop_assert!(back.theta.iter().zip(&m.theta).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(back.beta.iter().zip(&m.beta).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(codec::encode_message(&back).unwrap(), bytes);
    }
}

fn pose_strategy() -> impl Strategy<Value = CameraPose> {
    (rotation(), vec3(10.0)).prop_map(|(rotation, translation)| CameraPose { rotation, translation })
}

fn metric_case() -> impl Strategy<Value = (Vec<Vec<BodyParams>>, Vec<BodyParams>, Vec<Vec<CameraPose>>)> {
    (1usize..5).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(body_params(), 2), n),
            prop::collection::vec(body_params(), n),
            prop::collection::vec(prop::collection::vec(pose_strategy(), 2), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_frame_and_camera_order((est, gt, ext) in metric_case(), shift in 0usize..5) {
        let tpl = &ModelBundle::builtin().template;
        let mpe = metrics::mpe(&est, &gt, &ext).unwrap();
        let mpjpe = metrics::mpjpe(&est, &gt, &ext, tpl).unwrap();

        let n = est.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pe: Vec<_> = perm.iter().map(|&i| est[i].iter().rev().cloned().collect()).collect();
        let pg: Vec<_> = perm.iter().map(|&i| gt[i].clone()).collect();
        let px: Vec<_> = perm.iter().map(|&i| ext[i].iter().rev().cloned().collect()).collect();
        prop_assert!((metrics::mpe(&pe, &pg, &px).unwrap() - mpe).abs() < 1e-12);
        prop_assert!((metrics::mpjpe(&pe, &pg, &px, tpl).unwrap() - mpjpe).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_ignores_common_translation((est, gt, ext) in metric_case(), t in vec3(5.0)) {
        let tpl = &ModelBundle::builtin().template;
        let before = metrics::mpjpe(&est, &gt, &ext, tpl).unwrap();
        // A world translation t moves each camera-frame root by R·t.
        let est2: Vec<Vec<BodyParams>> = est
            .iter()
            .zip(&ext)
            .map(|(e, poses)| {
                e.iter()
                    .zip(poses)
                    .map(|(p, pose)| BodyParams { tau: rot::add(&p.tau, &rot::apply(&pose.rotation, &t)), ..p.clone() })
                    .collect()
            })
            .collect();
        let gt2: Vec<BodyParams> = gt.iter().map(|g| BodyParams { tau: rot::add(&g.tau, &t), ..g.clone() }).collect();
        prop_assert!((metrics::mpjpe(&est2, &gt2, &ext, tpl).unwrap() - before).abs() < 1e-9);
    }
}
