//! Central finite-difference checks of every analytic gradient.

use aerocap::ad;
use aerocap::body_model::{self, BodyParams, BETA_RANGE, PHI_RANGE, THETA_RANGE};
use aerocap::bundle::ModelBundle;
use aerocap::camera;
use aerocap::losses::{self, CameraView, GroundTruth, KeypointObservation, LossWeights, RobustConfig};
use aerocap::rotation::Rotation6D;
use aerocap::sequence_refine::{self as seqref, FrameEstimate, SequenceEstimate};
use aerocap::synthgen::{self, NoiseConfig, SceneConfig};
use aerocap::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const GATE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GateResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel: f64,
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if n == 0.0 {
        0.0
    } else {
        d / n
    }
}

fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

pub fn fd_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step(x[i]);
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let dn = f(&y);
            y[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Columns of the central-difference Jacobian, flattened column-major.
pub fn fd_jacobian(x: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut y = x.to_vec();
    let mut out = Vec::new();
    for i in 0..x.len() {
        let h = step(x[i]);
        y[i] = x[i] + h;
        let up = f(&y);
        y[i] = x[i] - h;
        let dn = f(&y);
        y[i] = x[i];
        out.extend(up.iter().zip(&dn).map(|(u, d)| (u - d) / (2.0 * h)));
    }
    out
}

/// One random evaluation point: a short noisy sequence plus perturbed
/// crop-frame estimates of its first frame.
pub struct Point {
    pub gt: Vec<GroundTruth>,
    pub views: Vec<CameraView>,
    pub obs: Vec<KeypointObservation>,
    pub est: Vec<BodyParams>,
    pub seq: SequenceEstimate,
    pub seq_obs: Vec<Vec<losses::ViewObservation>>,
}

fn perturb(rng: &mut ChaCha8Rng, v: &[f64], std: f64) -> Vec<f64> {
    let n = Normal::new(0.0, std).unwrap();
    v.iter().map(|x| x + n.sample(rng)).collect()
}

pub fn point(seed: u64) -> Point {
    let m = ModelBundle::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7e_57ee);
    let scene = SceneConfig {
        frames: 3,
        seed,
        beta_std: 0.5,
        ..Default::default()
    };
    let noise = NoiseConfig {
        occlusion_prob: vec![0.2, 0.2],
        ..Default::default()
    };
    let d = synthgen::generate_sequence(&scene, &noise, m).unwrap();
    let rec = &d.frames[0];

    let mut gt = Vec::new();
    let mut views = Vec::new();
    let mut obs = Vec::new();
    let mut est = Vec::new();
    for (c, cam) in rec.cameras.iter().enumerate() {
        let g = rec.camera_ground_truth(c);
        let tau_c = camera::full_to_crop(g.tau, &cam.crop, &cam.intrinsics).unwrap();
        let tau = perturb(&mut rng, &tau_c, 0.1);
        est.push(BodyParams {
            tau: [tau[0], tau[1], tau[2]],
            phi: Rotation6D(perturb(&mut rng, &g.phi.0, 0.1).try_into().unwrap()),
            theta: perturb(&mut rng, &g.theta, 0.05),
            beta: perturb(&mut rng, &g.beta, 0.3),
        });
        gt.push(g);
        views.push(CameraView {
            intrinsics: cam.intrinsics,
            crop: cam.crop,
        });
        obs.push(cam.keypoints.clone());
    }

    let frames: Vec<FrameEstimate> = d
        .frames
        .iter()
        .map(|r| FrameEstimate {
            frame_id: r.frame_id,
            cameras: (0..2)
                .map(|c| {
                    let mut p = r.camera_ground_truth_params(c);
                    p.tau = [p.tau[0] + rng.random_range(-0.2..0.2), p.tau[1], p.tau[2] + rng.random_range(-0.5..0.5)];
                    p.theta = perturb(&mut rng, &p.theta, 0.05);
                    p
                })
                .collect(),
        })
        .collect();
    let mut seq = seqref::init_from_airpose(&frames, &m.prior).unwrap();
    seq.beta = perturb(&mut rng, &seq.beta, 0.2);
    Point {
        gt,
        views,
        obs,
        est,
        seq,
        seq_obs: seqref::dataset_observations(&d),
    }
}

type Check = fn(&Point) -> f64;

fn baseline(p: &Point) -> f64 {
    let tpl = &ModelBundle::builtin().template;
    let w = LossWeights::eq3_baseline_syn();
    let g = losses::grad_baseline(tpl, &p.est[0], &p.gt[0], &p.views[0], &w).unwrap();
    let fd = fd_gradient(&p.est[0].to_flat(), |x| {
        let q = BodyParams::from_flat(x).unwrap();
        losses::loss_baseline(tpl, &q, &p.gt[0], &p.views[0], &w).unwrap().total
    });
    rel_err(&g, &fd)
}

fn airpose(p: &Point) -> f64 {
    let tpl = &ModelBundle::builtin().template;
    let w = LossWeights::eq4_airpose_syn();
    let g = losses::grad_airpose(tpl, &p.est, &p.gt, &p.views, &w).unwrap();
    (0..2)
        .map(|c| {
            let fd = fd_gradient(&p.est[c].to_flat(), |x| {
                losses::airpose_agent_objective(tpl, x, &p.est[1 - c], &p.gt[c], &p.views[c], &w).unwrap()
            });
            rel_err(&g[c], &fd)
        })
        .fold(0.0, f64::max)
}

fn finetune_baseline(p: &Point) -> f64 {
    let m = ModelBundle::builtin();
    let w = LossWeights::eq5_finetune_baseline();
    let g = losses::grad_finetune_baseline(&m.template, &m.prior, &p.est[0], &p.obs[0], &p.views[0], &w).unwrap();
    let fd = fd_gradient(&p.est[0].to_flat(), |x| {
        let q = BodyParams::from_flat(x).unwrap();
        losses::loss_finetune_baseline(&m.template, &m.prior, &q, &p.obs[0], &p.views[0], &w)
            .unwrap()
            .total
    });
    rel_err(&g, &fd)
}

fn finetune_airpose(p: &Point) -> f64 {
    let m = ModelBundle::builtin();
    let w = LossWeights::eq6_finetune_airpose();
    let g = losses::grad_finetune_airpose(&m.template, &m.prior, &p.est, &p.obs, &p.views, &w).unwrap();
    let x: Vec<f64> = p.est.iter().flat_map(|e| e.to_flat()).collect();
    let n = x.len() / 2;
    let fd = fd_gradient(&x, |x| {
        let q = [BodyParams::from_flat(&x[..n]).unwrap(), BodyParams::from_flat(&x[n..]).unwrap()];
        losses::loss_finetune_airpose(&m.template, &m.prior, &q, &p.obs, &p.views, &w)
            .unwrap()
            .total
    });
    rel_err(&g, &fd)
}

fn airpose_plus(p: &Point) -> f64 {
    let m = ModelBundle::builtin();
    let w = LossWeights::eq8_airpose_plus();
    let r = RobustConfig::default();
    let (_, g) = losses::grad_airpose_plus(&m.template, &m.prior, &p.seq, &p.seq_obs, &w, &r).unwrap();
    let fd = fd_gradient(&p.seq.to_flat(), |x| {
        let s = p.seq.with_flat(x).unwrap();
        losses::loss_airpose_plus(&m.template, &m.prior, &s, &p.seq_obs, &w, &r)
            .unwrap()
            .total
    });
    rel_err(&g, &fd)
}

fn posed_flat(x: &[f64]) -> Vec<f64> {
    let tpl = &ModelBundle::builtin().template;
    let posed = body_model::pose(tpl, &x[0..3], &x[PHI_RANGE], &x[THETA_RANGE], &x[BETA_RANGE], true).unwrap();
    posed
        .joints
        .iter()
        .chain(posed.vertices.as_deref().unwrap())
        .flat_map(|v| v.0)
        .collect()
}

fn body_jacobian(p: &Point) -> f64 {
    let tpl = &ModelBundle::builtin().template;
    let x = p.est[0].to_flat();
    let (_, rows) = ad::jacobian(&x, |x| {
        let posed = body_model::pose(tpl, &x[0..3], &x[PHI_RANGE], &x[THETA_RANGE], &x[BETA_RANGE], true)?;
        Ok::<_, Error>(
            posed
                .joints
                .iter()
                .chain(posed.vertices.as_deref().unwrap())
                .flat_map(|v| v.0)
                .collect(),
        )
    })
    .unwrap();
    // Column-major to match `fd_jacobian`.
    let analytic: Vec<f64> = (0..x.len()).flat_map(|i| rows.iter().map(move |r| r[i])).collect();
    rel_err(&analytic, &fd_jacobian(&x, posed_flat))
}

pub const CHECKS: [(&str, Check); 6] = [
    ("baseline", baseline),
    ("airpose", airpose),
    ("finetune_baseline", finetune_baseline),
    ("finetune_airpose", finetune_airpose),
    ("airpose_plus", airpose_plus),
    ("body_jacobian", body_jacobian),
];

/// Runs every check at `points` seeded points.
pub fn run_all(points: usize, seed: u64) -> Vec<GateResult> {
    let pts: Vec<Point> = (0..points as u64).map(|k| point(seed.wrapping_mul(1000) + k)).collect();
    CHECKS
        .iter()
        .map(|&(name, check)| GateResult {
            name,
            points,
            max_rel: pts.iter().map(check).fold(0.0, f64::max),
        })
        .collect()
}
