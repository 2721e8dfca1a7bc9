//! Training, fine-tuning and sequence-refinement objectives.
//!
//! Every objective is written once over [`Real`] and evaluated both in `f64`
//! (value plus per-term breakdown) and on the autodiff tape (gradients).
//!
//! Conventions shared by the per-frame losses:
//! * the estimate's `tau` is the crop-frame root translation in meters; it is
//!   lifted to the full camera frame with the view's [`CropParams`];
//! * ground-truth `tau` is the full camera frame translation;
//! * rotation differences are squared differences of raw 6D encodings.

use serde::{Deserialize, Serialize};

use crate::ad::{self, Real, Var};
use crate::body_model::{
    self, BodyParams, BodyTemplate, BETA_DIM, BETA_RANGE, NUM_JOINTS, PARAM_DIM, PHI_RANGE, THETA_DIM,
    THETA_RANGE,
};
use crate::camera::{self, CropParams, Intrinsics};
use crate::error::{Error, Result};
use crate::geom::V3;
use crate::pose_prior::PriorBasis;
use crate::rotation::Rotation6D;
use crate::sequence_refine::SequenceEstimate;

/// Geman-McClure scale, pixels.
pub const DEFAULT_SIGMA: f64 = 100.0;
/// Minimum per-frame confidence mass (25% of 2 cameras × 22 joints).
pub const DEFAULT_CONF_THRESHOLD: f64 = 11.0;

pub const PRESET_NAMES: [&str; 5] = [
    "eq3-baseline-syn",
    "eq4-airpose-syn",
    "eq5-finetune-baseline",
    "eq6-finetune-airpose",
    "eq8-airpose-plus",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub j2d: f64,
    pub j3d: f64,
    pub phi: f64,
    pub tau: f64,
    pub theta: f64,
    pub beta: f64,
    pub vertices: f64,
    pub vposer: f64,
    pub temp: f64,
}

impl LossWeights {
    pub fn eq3_baseline_syn() -> Self {
        LossWeights {
            j2d: 0.01,
            j3d: 1.0,
            phi: 1.0,
            theta: 100.0,
            beta: 1.0,
            vertices: 100.0,
            ..Default::default()
        }
    }

    pub fn eq4_airpose_syn() -> Self {
        LossWeights {
            j2d: 0.002,
            j3d: 1.0,
            phi: 1.0,
            tau: 10.0,
            theta: 50.0,
            beta: 1.0,
            vertices: 50.0,
            ..Default::default()
        }
    }

    pub fn eq5_finetune_baseline() -> Self {
        LossWeights {
            j2d: 0.01,
            beta: 5.0,
            vposer: 1.0,
            ..Default::default()
        }
    }

    pub fn eq6_finetune_airpose() -> Self {
        LossWeights {
            j2d: 0.01,
            beta: 5.0,
            vposer: 0.1,
            theta: 100.0,
            ..Default::default()
        }
    }

    pub fn eq8_airpose_plus() -> Self {
        LossWeights {
            j2d: 1.0,
            vposer: 0.05,
            temp: 1.0,
            beta: 2000.0,
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "eq3-baseline-syn" => Ok(Self::eq3_baseline_syn()),
            "eq4-airpose-syn" => Ok(Self::eq4_airpose_syn()),
            "eq5-finetune-baseline" => Ok(Self::eq5_finetune_baseline()),
            "eq6-finetune-airpose" => Ok(Self::eq6_finetune_airpose()),
            "eq8-airpose-plus" => Ok(Self::eq8_airpose_plus()),
            other => Err(Error::Config(format!("unknown weight preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.j2d,
            self.j3d,
            self.phi,
            self.tau,
            self.theta,
            self.beta,
            self.vertices,
            self.vposer,
            self.temp,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and nonnegative".into()))
        }
    }

    /// Every weight multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            j2d: self.j2d * k,
            j3d: self.j3d * k,
            phi: self.phi * k,
            tau: self.tau * k,
            theta: self.theta * k,
            beta: self.beta * k,
            vertices: self.vertices * k,
            vposer: self.vposer * k,
            temp: self.temp * k,
        }
    }
}

/// 2D detections for one camera: pixel position and confidence per joint.
/// Missing detections carry confidence 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointObservation {
    pub keypoints: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl KeypointObservation {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints.len() != NUM_JOINTS {
            return Err(Error::shape("keypoints", NUM_JOINTS, self.keypoints.len()));
        }
        if self.confidence.len() != NUM_JOINTS {
            return Err(Error::shape("confidences", NUM_JOINTS, self.confidence.len()));
        }
        if self.confidence.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Dataset("confidence outside [0, 1]".into()));
        }
        if self.keypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite keypoint".into()));
        }
        Ok(())
    }

    pub fn total_confidence(&self) -> f64 {
        self.confidence.iter().sum()
    }

    pub fn scaled_confidence(&self, k: f64) -> Self {
        KeypointObservation {
            keypoints: self.keypoints.clone(),
            confidence: self.confidence.iter().map(|w| w * k).collect(),
        }
    }
}

/// Ground truth for one camera; `tau`/`phi` are relative to that camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub tau: [f64; 3],
    pub phi: Rotation6D,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        self.as_params().validate()
    }

    pub fn as_params(&self) -> BodyParams {
        BodyParams {
            tau: self.tau,
            phi: self.phi,
            theta: self.theta.clone(),
            beta: self.beta.clone(),
        }
    }
}

/// Camera intrinsics plus the crop that produced the network input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub crop: CropParams,
}

/// Intrinsics and detections of one camera at one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewObservation {
    pub intrinsics: Intrinsics,
    pub keypoints: KeypointObservation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub raw: f64,
    pub weight: f64,
    pub weighted: f64,
}

/// Weighted terms in a fixed order; `total` is their left-to-right sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossBreakdown {
    fn from_terms(terms: Vec<(&str, f64, f64)>) -> Self {
        let terms: Vec<LossTerm> = terms
            .into_iter()
            .map(|(name, raw, weight)| LossTerm {
                name: name.to_string(),
                raw,
                weight,
                weighted: raw * weight,
            })
            .collect();
        let total = terms.iter().map(|t| t.weighted).sum();
        LossBreakdown { terms, total }
    }

    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// `ρ(e) = σ²e²/(σ² + e²)`.
pub fn geman_mcclure(e: f64, sigma: f64) -> f64 {
    geman_mcclure_generic(e, sigma)
}

pub fn geman_mcclure_generic<T: Real>(e: T, sigma: f64) -> T {
    let s2 = sigma * sigma;
    let e2 = e * e;
    e2 * s2 / (e2 + s2)
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

fn sq_dist_c<T: Real>(a: &[T], b: &[f64]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

fn sq_norm<T: Real>(a: &[T]) -> T {
    let mut acc = T::zero();
    for x in a {
        acc += *x * *x;
    }
    acc
}

fn point_sq_dist<T: Real>(a: &[V3<T>], b: &[V3<T>]) -> T {
    let mut acc = T::zero();
    for (p, q) in a.iter().zip(b) {
        acc += p.sub(q).norm_sq();
    }
    acc
}

fn lift<T: Real>(x: &[T]) -> Vec<T> {
    x.to_vec()
}

fn cst_vec<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::cst(v)).collect()
}

/// Full-frame joints projected into the full image; `x` is a flat
/// [`BodyParams`] with crop-frame τ.
fn projected_joints<T: Real>(tpl: &BodyTemplate, x: &[T], view: &CameraView) -> Result<Vec<[T; 2]>> {
    let tau = camera::crop_to_full_generic(&V3::from_slice(&x[0..3]), &view.crop, &view.intrinsics)?;
    let posed = body_model::pose(tpl, &tau.0, &x[PHI_RANGE], &x[THETA_RANGE], &x[BETA_RANGE], false)?;
    posed
        .joints
        .iter()
        .map(|j| camera::project_generic(j, &view.intrinsics))
        .collect()
}

fn full_tau<T: Real>(x: &[T], view: &CameraView) -> Result<V3<T>> {
    camera::crop_to_full_generic(&V3::from_slice(&x[0..3]), &view.crop, &view.intrinsics)
}

fn gt_projected(tpl: &BodyTemplate, gt: &GroundTruth, k: &Intrinsics) -> Result<Vec<[f64; 2]>> {
    body_model::joints(&gt.as_params(), tpl)?
        .into_iter()
        .map(|j| camera::project(j, k))
        .collect()
}

const ZERO6: [f64; 6] = [0.0; 6];

/// Joints or vertices with τ = 0 and the given φ (zero-filled means identity).
fn local_points<T: Real>(tpl: &BodyTemplate, phi: &[T], theta: &[T], beta: &[T], vertices: bool) -> Result<Vec<V3<T>>> {
    let tau = [T::zero(); 3];
    let posed = body_model::pose(tpl, &tau, phi, theta, beta, vertices)?;
    Ok(if vertices {
        posed.vertices.expect("requested")
    } else {
        posed.joints
    })
}

fn check_flat(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::shape("flat parameters", n, x.len()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic-data supervision, single camera.

struct BaselineConsts {
    gt_2d: Vec<[f64; 2]>,
    gt_j3d: Vec<V3<f64>>,
    gt_v: Vec<V3<f64>>,
}

fn baseline_consts(tpl: &BodyTemplate, gt: &GroundTruth, view: &CameraView) -> Result<BaselineConsts> {
    Ok(BaselineConsts {
        gt_2d: gt_projected(tpl, gt, &view.intrinsics)?,
        gt_j3d: local_points(tpl, &ZERO6, &gt.theta, &gt.beta, false)?,
        gt_v: local_points(tpl, &ZERO6, &gt.theta, &gt.beta, true)?,
    })
}

fn baseline_terms<T: Real>(
    tpl: &BodyTemplate,
    x: &[T],
    gt: &GroundTruth,
    c: &BaselineConsts,
    view: &CameraView,
) -> Result<[T; 6]> {
    let proj = projected_joints(tpl, x, view)?;
    let mut j2d = T::zero();
    for (p, g) in proj.iter().zip(&c.gt_2d) {
        j2d += sq_dist_c(p, g);
    }
    let theta = &x[THETA_RANGE];
    let beta = &x[BETA_RANGE];
    let zero6 = cst_vec::<T>(&ZERO6);
    let j3d_est = local_points(tpl, &zero6, theta, beta, false)?;
    let v_est = local_points(tpl, &zero6, theta, beta, true)?;
    let gt_j3d: Vec<V3<T>> = c.gt_j3d.iter().map(|v| V3::from_f64(v.0)).collect();
    let gt_v: Vec<V3<T>> = c.gt_v.iter().map(|v| V3::from_f64(v.0)).collect();
    Ok([
        j2d,
        point_sq_dist(&j3d_est, &gt_j3d),
        sq_dist_c(&x[PHI_RANGE], &gt.phi.0),
        sq_dist_c(theta, &gt.theta),
        sq_norm(beta),
        point_sq_dist(&v_est, &gt_v),
    ])
}

const BASELINE_NAMES: [&str; 6] = ["j2d", "j3d", "phi", "theta", "beta", "vertices"];

fn baseline_weights(w: &LossWeights) -> [f64; 6] {
    [w.j2d, w.j3d, w.phi, w.theta, w.beta, w.vertices]
}

/// Single-camera synthetic supervision: 2D reprojection against projected
/// ground truth, root-free 3D joints and vertices, raw rotation, pose and a
/// shape-magnitude penalty.
pub fn loss_baseline(
    tpl: &BodyTemplate,
    params: &BodyParams,
    gt: &GroundTruth,
    view: &CameraView,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    params.validate()?;
    gt.validate()?;
    let c = baseline_consts(tpl, gt, view)?;
    let t = baseline_terms(tpl, &params.to_flat(), gt, &c, view)?;
    let ws = baseline_weights(w);
    Ok(LossBreakdown::from_terms(
        (0..6).map(|i| (BASELINE_NAMES[i], t[i], ws[i])).collect(),
    ))
}

pub fn grad_baseline(
    tpl: &BodyTemplate,
    params: &BodyParams,
    gt: &GroundTruth,
    view: &CameraView,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    params.validate()?;
    gt.validate()?;
    let c = baseline_consts(tpl, gt, view)?;
    let ws = baseline_weights(w);
    let (_, g) = ad::gradient(&params.to_flat(), |x| {
        let t = baseline_terms(tpl, x, gt, &c, view)?;
        Ok::<Var, Error>(weighted_sum(&t, &ws))
    })?;
    Ok(g)
}

fn weighted_sum<T: Real>(t: &[T], w: &[f64]) -> T {
    let mut acc = T::zero();
    for (v, k) in t.iter().zip(w) {
        acc += *v * *k;
    }
    acc
}

// ---------------------------------------------------------------------------
// Synthetic-data supervision, two cameras with cross-view consistency.

const AIRPOSE_NAMES: [&str; 10] = [
    "j2d",
    "j3d",
    "phi",
    "tau",
    "theta",
    "beta",
    "vertices",
    "theta_cross",
    "beta_cross",
    "vertices_cross",
];

fn airpose_weights(w: &LossWeights) -> [f64; 10] {
    [
        w.j2d, w.j3d, w.phi, w.tau, w.theta, w.beta, w.vertices, w.theta, w.beta, w.vertices,
    ]
}

struct AirposeConsts {
    gt_2d: Vec<[f64; 2]>,
    gt_j3d: Vec<V3<f64>>,
    gt_v: Vec<V3<f64>>,
    partner: Vec<f64>,
    partner_v: Vec<V3<f64>>,
}

fn airpose_consts(tpl: &BodyTemplate, gt: &GroundTruth, view: &CameraView, partner: &BodyParams) -> Result<AirposeConsts> {
    Ok(AirposeConsts {
        gt_2d: gt_projected(tpl, gt, &view.intrinsics)?,
        gt_j3d: local_points(tpl, &ZERO6, &gt.theta, &gt.beta, false)?,
        gt_v: local_points(tpl, &gt.phi.0, &gt.theta, &gt.beta, true)?,
        partner: partner.to_flat(),
        partner_v: local_points(tpl, &partner.phi.0, &partner.theta, &partner.beta, true)?,
    })
}

/// Terms of one agent's share: its own camera terms plus half of each
/// cross-view term, with the partner's parameters held constant.
fn airpose_agent_terms<T: Real>(
    tpl: &BodyTemplate,
    x: &[T],
    gt: &GroundTruth,
    c: &AirposeConsts,
    view: &CameraView,
) -> Result<[T; 10]> {
    let proj = projected_joints(tpl, x, view)?;
    let mut j2d = T::zero();
    for (p, g) in proj.iter().zip(&c.gt_2d) {
        j2d += sq_dist_c(p, g);
    }
    let phi = &x[PHI_RANGE];
    let theta = &x[THETA_RANGE];
    let beta = &x[BETA_RANGE];
    let zero6 = cst_vec::<T>(&ZERO6);
    let j3d_est = local_points(tpl, &zero6, theta, beta, false)?;
    let v_est = local_points(tpl, phi, theta, beta, true)?;
    let gt_j3d: Vec<V3<T>> = c.gt_j3d.iter().map(|v| V3::from_f64(v.0)).collect();
    let gt_v: Vec<V3<T>> = c.gt_v.iter().map(|v| V3::from_f64(v.0)).collect();
    let partner_v: Vec<V3<T>> = c.partner_v.iter().map(|v| V3::from_f64(v.0)).collect();
    let tau = full_tau(x, view)?;
    let half = 0.5;
    Ok([
        j2d,
        point_sq_dist(&j3d_est, &gt_j3d),
        sq_dist_c(phi, &gt.phi.0),
        sq_dist_c(&tau.0, &gt.tau),
        sq_dist_c(theta, &gt.theta),
        sq_norm(beta),
        point_sq_dist(&v_est, &gt_v),
        sq_dist_c(theta, &c.partner[THETA_RANGE]) * half,
        sq_dist_c(beta, &c.partner[BETA_RANGE]) * half,
        point_sq_dist(&v_est, &partner_v) * half,
    ])
}

fn check_pair<T>(v: &[T], what: &'static str) -> Result<()> {
    if v.len() != 2 {
        return Err(Error::shape(what, 2, v.len()));
    }
    Ok(())
}

/// Two-camera synthetic supervision with cross-view pose, shape and vertex
/// consistency. Cross-view terms are evaluated from both sides and halved.
pub fn loss_airpose(
    tpl: &BodyTemplate,
    params: &[BodyParams],
    gt: &[GroundTruth],
    views: &[CameraView],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_pair(params, "cameras")?;
    check_pair(gt, "ground truth cameras")?;
    check_pair(views, "camera views")?;
    let mut sums = [0.0; 10];
    for c in 0..2 {
        params[c].validate()?;
        gt[c].validate()?;
        let k = airpose_consts(tpl, &gt[c], &views[c], &params[1 - c])?;
        let t = airpose_agent_terms(tpl, &params[c].to_flat(), &gt[c], &k, &views[c])?;
        for (s, v) in sums.iter_mut().zip(t) {
            *s += v;
        }
    }
    let ws = airpose_weights(w);
    Ok(LossBreakdown::from_terms(
        (0..10).map(|i| (AIRPOSE_NAMES[i], sums[i], ws[i])).collect(),
    ))
}

/// Per-agent gradients: entry `c` is the gradient of agent `c`'s share of
/// the objective with respect to its own parameters, partner held fixed.
pub fn grad_airpose(
    tpl: &BodyTemplate,
    params: &[BodyParams],
    gt: &[GroundTruth],
    views: &[CameraView],
    w: &LossWeights,
) -> Result<[Vec<f64>; 2]> {
    check_pair(params, "cameras")?;
    check_pair(gt, "ground truth cameras")?;
    check_pair(views, "camera views")?;
    let ws = airpose_weights(w);
    let mut out = [Vec::new(), Vec::new()];
    for c in 0..2 {
        params[c].validate()?;
        let k = airpose_consts(tpl, &gt[c], &views[c], &params[1 - c])?;
        let (_, g) = ad::gradient(&params[c].to_flat(), |x| {
            let t = airpose_agent_terms(tpl, x, &gt[c], &k, &views[c])?;
            Ok::<Var, Error>(weighted_sum(&t, &ws))
        })?;
        out[c] = g;
    }
    Ok(out)
}

/// Agent `c`'s share of [`loss_airpose`] as a function of its own flat
/// parameters (partner fixed); the total is the sum over both agents.
pub fn airpose_agent_objective(
    tpl: &BodyTemplate,
    own: &[f64],
    partner: &BodyParams,
    gt: &GroundTruth,
    view: &CameraView,
    w: &LossWeights,
) -> Result<f64> {
    check_flat(own, PARAM_DIM)?;
    let k = airpose_consts(tpl, gt, view, partner)?;
    let t = airpose_agent_terms(tpl, own, gt, &k, view)?;
    Ok(weighted_sum(&t, &airpose_weights(w)))
}

// ---------------------------------------------------------------------------
// Keypoint fine-tuning.

fn reprojection<T: Real>(tpl: &BodyTemplate, x: &[T], obs: &KeypointObservation, view: &CameraView) -> Result<T> {
    let proj = projected_joints(tpl, x, view)?;
    let mut acc = T::zero();
    for ((p, kp), &wj) in proj.iter().zip(&obs.keypoints).zip(&obs.confidence) {
        if wj != 0.0 {
            acc += sq_dist_c(p, kp) * wj;
        }
    }
    Ok(acc)
}

fn finetune_baseline_terms<T: Real>(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    x: &[T],
    obs: &KeypointObservation,
    view: &CameraView,
) -> Result<[T; 3]> {
    Ok([
        reprojection(tpl, x, obs, view)?,
        sq_norm(&x[BETA_RANGE]),
        sq_norm(&prior.encode_generic(&x[THETA_RANGE])),
    ])
}

/// Single-camera keypoint fine-tuning: confidence-weighted squared
/// reprojection, shape magnitude and latent pose prior.
pub fn loss_finetune_baseline(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    params: &BodyParams,
    obs: &KeypointObservation,
    view: &CameraView,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    params.validate()?;
    obs.validate()?;
    let t = finetune_baseline_terms(tpl, prior, &params.to_flat(), obs, view)?;
    Ok(LossBreakdown::from_terms(vec![
        ("j2d", t[0], w.j2d),
        ("beta", t[1], w.beta),
        ("vposer", t[2], w.vposer),
    ]))
}

pub fn grad_finetune_baseline(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    params: &BodyParams,
    obs: &KeypointObservation,
    view: &CameraView,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    params.validate()?;
    obs.validate()?;
    let ws = [w.j2d, w.beta, w.vposer];
    let (_, g) = ad::gradient(&params.to_flat(), |x| {
        let t = finetune_baseline_terms(tpl, prior, x, obs, view)?;
        Ok::<Var, Error>(weighted_sum(&t, &ws))
    })?;
    Ok(g)
}

fn finetune_airpose_terms<T: Real>(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    x: &[T],
    obs: &[KeypointObservation],
    views: &[CameraView],
) -> Result<[T; 4]> {
    let (x1, x2) = x.split_at(PARAM_DIM);
    let mut j2d = T::zero();
    let mut beta = T::zero();
    let mut vposer = T::zero();
    for (xc, (o, v)) in [x1, x2].iter().zip(obs.iter().zip(views)) {
        j2d += reprojection(tpl, xc, o, v)?;
        beta += sq_norm(&xc[BETA_RANGE]);
        vposer += sq_norm(&prior.encode_generic(&xc[THETA_RANGE]));
    }
    beta += sq_dist(&x1[BETA_RANGE], &x2[BETA_RANGE]);
    let theta = sq_dist(&x1[THETA_RANGE], &x2[THETA_RANGE]);
    Ok([j2d, beta, vposer, theta])
}

fn stack_pair(params: &[BodyParams]) -> Vec<f64> {
    let mut x = params[0].to_flat();
    x.extend(params[1].to_flat());
    x
}

/// Two-camera keypoint fine-tuning: per-camera reprojection, shape
/// magnitude and agreement, latent pose prior and pose agreement.
pub fn loss_finetune_airpose(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    params: &[BodyParams],
    obs: &[KeypointObservation],
    views: &[CameraView],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_pair(params, "cameras")?;
    check_pair(obs, "observations")?;
    check_pair(views, "camera views")?;
    for (p, o) in params.iter().zip(obs) {
        p.validate()?;
        o.validate()?;
    }
    let t = finetune_airpose_terms(tpl, prior, &stack_pair(params), obs, views)?;
    Ok(LossBreakdown::from_terms(vec![
        ("j2d", t[0], w.j2d),
        ("beta", t[1], w.beta),
        ("vposer", t[2], w.vposer),
        ("theta", t[3], w.theta),
    ]))
}

/// Joint gradient over both cameras' parameters (camera 1 then camera 2).
pub fn grad_finetune_airpose(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    params: &[BodyParams],
    obs: &[KeypointObservation],
    views: &[CameraView],
    w: &LossWeights,
) -> Result<Vec<f64>> {
    check_pair(params, "cameras")?;
    check_pair(obs, "observations")?;
    check_pair(views, "camera views")?;
    for (p, o) in params.iter().zip(obs) {
        p.validate()?;
        o.validate()?;
    }
    let ws = [w.j2d, w.beta, w.vposer, w.theta];
    let (_, g) = ad::gradient(&stack_pair(params), |x| {
        let t = finetune_airpose_terms(tpl, prior, x, obs, views)?;
        Ok::<Var, Error>(weighted_sum(&t, &ws))
    })?;
    Ok(g)
}

// ---------------------------------------------------------------------------
// Sequence refinement objective.

/// Options of the sequence objective besides the weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub sigma: f64,
    pub conf_threshold: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            sigma: DEFAULT_SIGMA,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
        }
    }
}

pub(crate) fn check_sequence(seq: &SequenceEstimate, obs: &[Vec<ViewObservation>]) -> Result<()> {
    seq.validate()?;
    if seq.frames.len() < 2 {
        return Err(Error::SequenceTooShort {
            min: 2,
            got: seq.frames.len(),
        });
    }
    if obs.len() != seq.frames.len() {
        return Err(Error::shape("observation frames", seq.frames.len(), obs.len()));
    }
    for (f, o) in seq.frames.iter().zip(obs) {
        if o.len() != f.cameras.len() {
            return Err(Error::shape("observation cameras", f.cameras.len(), o.len()));
        }
        for v in o {
            v.keypoints.validate()?;
        }
    }
    Ok(())
}

/// Whether frame `t` carries enough confidence mass for a reprojection term.
pub fn frame_is_gated_in(obs: &[ViewObservation], conf_threshold: f64) -> bool {
    let mass: f64 = obs.iter().map(|v| v.keypoints.total_confidence()).sum();
    mass >= conf_threshold
}

/// Robust confidence-weighted reprojection for one camera at one frame.
pub(crate) fn robust_reprojection<T: Real>(
    tpl: &BodyTemplate,
    tau: &[T],
    phi: &[T],
    theta: &[T],
    beta: &[T],
    obs: &ViewObservation,
    sigma: f64,
) -> Result<T> {
    let posed = body_model::pose(tpl, tau, phi, theta, beta, false)?;
    let mut acc = T::zero();
    for ((j, kp), &wj) in posed
        .joints
        .iter()
        .zip(&obs.keypoints.keypoints)
        .zip(&obs.keypoints.confidence)
    {
        if wj == 0.0 {
            continue;
        }
        let p = camera::project_generic(j, &obs.intrinsics)?;
        let r = geman_mcclure_generic(p[0] - kp[0], sigma) + geman_mcclure_generic(p[1] - kp[1], sigma);
        acc += r * wj;
    }
    Ok(acc)
}

/// Sequence terms in θ-space: `[j2d, temp, beta]`, summed over t, then c,
/// then j. `thetas[t]` is the decoded pose at frame t.
pub(crate) fn sequence_terms<T: Real>(
    tpl: &BodyTemplate,
    beta: &[T],
    thetas: &[Vec<T>],
    roots: &[Vec<(Vec<T>, Vec<T>)>],
    obs: &[Vec<ViewObservation>],
    robust: &RobustConfig,
) -> Result<[T; 3]> {
    let mut j2d = T::zero();
    let mut temp = T::zero();
    for t in 0..thetas.len() {
        if frame_is_gated_in(&obs[t], robust.conf_threshold) {
            for (c, (phi, tau)) in roots[t].iter().enumerate() {
                j2d += robust_reprojection(tpl, tau, phi, &thetas[t], beta, &obs[t][c], robust.sigma)
                    .map_err(|e| tag_frame(e, t))?;
            }
        }
        if t > 0 {
            temp += sq_dist(&thetas[t], &thetas[t - 1]);
            for (c, (phi, tau)) in roots[t].iter().enumerate() {
                let (pphi, ptau) = &roots[t - 1][c];
                temp += sq_dist(phi, pphi);
                temp += sq_dist(tau, ptau);
            }
        }
    }
    Ok([j2d, temp, sq_norm(beta)])
}

fn tag_frame(e: Error, t: usize) -> Error {
    match e {
        Error::NonFiniteObjective { .. } => Error::NonFiniteObjective { frame: Some(t) },
        other => other,
    }
}

/// Whole-sequence objective over one shared shape, one latent pose per
/// frame and per-camera root rotation and translation (full camera frame):
/// robust reprojection (frames below the confidence threshold skipped),
/// latent prior, adjacent-frame smoothness and a shape penalty.
pub fn loss_airpose_plus(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    seq: &SequenceEstimate,
    obs: &[Vec<ViewObservation>],
    w: &LossWeights,
    robust: &RobustConfig,
) -> Result<LossBreakdown> {
    check_sequence(seq, obs)?;
    let thetas: Vec<Vec<f64>> = seq.frames.iter().map(|f| prior.decode_slice(&f.v.0)).collect();
    let roots: Vec<Vec<(Vec<f64>, Vec<f64>)>> = seq
        .frames
        .iter()
        .map(|f| f.cameras.iter().map(|c| (c.phi.0.to_vec(), c.tau.to_vec())).collect())
        .collect();
    let [j2d, temp, beta] = sequence_terms(tpl, &seq.beta, &thetas, &roots, obs, robust)?;
    let vposer: f64 = seq.frames.iter().map(|f| f.v.norm_sq()).sum();
    let b = LossBreakdown::from_terms(vec![
        ("j2d", j2d, w.j2d),
        ("vposer", vposer, w.vposer),
        ("temp", temp, w.temp),
        ("beta", beta, w.beta),
    ]);
    if !b.total.is_finite() {
        return Err(Error::NonFiniteObjective { frame: None });
    }
    Ok(b)
}

/// Gradient of [`loss_airpose_plus`] in the layout of
/// [`SequenceEstimate::to_flat`].
pub fn grad_airpose_plus(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    seq: &SequenceEstimate,
    obs: &[Vec<ViewObservation>],
    w: &LossWeights,
    robust: &RobustConfig,
) -> Result<(f64, Vec<f64>)> {
    check_sequence(seq, obs)?;
    let n_frames = seq.frames.len();
    let n_cams = seq.frames[0].cameras.len();
    // θ-space leaves: β, θ_t for every t, then (φ, τ) per t per camera.
    let mut x = seq.beta.clone();
    for f in &seq.frames {
        x.extend(prior.decode_slice(&f.v.0));
    }
    for f in &seq.frames {
        for c in &f.cameras {
            x.extend_from_slice(&c.phi.0);
            x.extend_from_slice(&c.tau);
        }
    }
    let theta_off = BETA_DIM;
    let root_off = theta_off + n_frames * THETA_DIM;
    let ws = [w.j2d, w.temp, w.beta];
    let (value, g) = ad::gradient(&x, |x| {
        let beta = lift(&x[..BETA_DIM]);
        let thetas: Vec<Vec<Var>> = (0..n_frames)
            .map(|t| lift(&x[theta_off + t * THETA_DIM..theta_off + (t + 1) * THETA_DIM]))
            .collect();
        let roots: Vec<Vec<(Vec<Var>, Vec<Var>)>> = (0..n_frames)
            .map(|t| {
                (0..n_cams)
                    .map(|c| {
                        let o = root_off + (t * n_cams + c) * 9;
                        (lift(&x[o..o + 6]), lift(&x[o + 6..o + 9]))
                    })
                    .collect()
            })
            .collect();
        let terms = sequence_terms(tpl, &beta, &thetas, &roots, obs, &RobustConfig { ..*robust })?;
        Ok::<Var, Error>(weighted_sum(&terms, &ws))
    })?;

    let mut out = Vec::with_capacity(seq.flat_len());
    out.extend_from_slice(&g[..BETA_DIM]);
    let mut vposer = 0.0;
    for (t, f) in seq.frames.iter().enumerate() {
        let gt = &g[theta_off + t * THETA_DIM..theta_off + (t + 1) * THETA_DIM];
        let gv = prior.pull_back(gt);
        out.extend(gv.iter().zip(&f.v.0).map(|(a, v)| a + 2.0 * w.vposer * v));
        vposer += f.v.norm_sq();
    }
    out.extend_from_slice(&g[root_off..]);
    let total = value + w.vposer * vposer;
    if !total.is_finite() {
        return Err(Error::NonFiniteObjective { frame: None });
    }
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::ModelBundle;

    #[test]
    fn preset_values() {
        let w = LossWeights::preset("eq3-baseline-syn").unwrap();
        assert_eq!(
            (w.j2d, w.j3d, w.phi, w.theta, w.beta, w.vertices),
            (0.01, 1.0, 1.0, 100.0, 1.0, 100.0)
        );
        let w = LossWeights::preset("eq4-airpose-syn").unwrap();
        assert_eq!(
            (w.j2d, w.j3d, w.phi, w.tau, w.theta, w.beta, w.vertices),
            (0.002, 1.0, 1.0, 10.0, 50.0, 1.0, 50.0)
        );
        let w = LossWeights::preset("eq5-finetune-baseline").unwrap();
        assert_eq!((w.j2d, w.beta, w.vposer), (0.01, 5.0, 1.0));
        let w = LossWeights::preset("eq6-finetune-airpose").unwrap();
        assert_eq!((w.j2d, w.beta, w.vposer, w.theta), (0.01, 5.0, 0.1, 100.0));
        let w = LossWeights::preset("eq8-airpose-plus").unwrap();
        assert_eq!((w.j2d, w.vposer, w.temp, w.beta), (1.0, 0.05, 1.0, 2000.0));
        assert!(LossWeights::preset("nope").is_err());
        for name in PRESET_NAMES {
            LossWeights::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn geman_mcclure_shape() {
        let s = 7.0;
        assert_eq!(geman_mcclure(0.0, s), 0.0);
        assert!((geman_mcclure(s, s) - s * s / 2.0).abs() < 1e-12);
        assert!(geman_mcclure(100.0 * s, s) > 0.9999 * s * s);
        assert_eq!(geman_mcclure(-3.0, s), geman_mcclure(3.0, s));
        let mut prev = 0.0;
        for i in 1..200 {
            let v = geman_mcclure(i as f64 * 0.5, s);
            assert!(v >= prev && v <= s * s);
            prev = v;
        }
    }

    #[test]
    fn observation_validation() {
        let ok = KeypointObservation {
            keypoints: vec![[0.0, 0.0]; NUM_JOINTS],
            confidence: vec![1.0; NUM_JOINTS],
        };
        ok.validate().unwrap();
        let mut bad = ok.clone();
        bad.confidence[2] = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.keypoints.pop();
        assert!(matches!(bad.validate(), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn finetune_shape_mismatch() {
        let b = ModelBundle::builtin();
        let mut p = BodyParams::default();
        p.tau = [0.0, 0.0, 10.0];
        p.beta.push(1.0);
        let obs = KeypointObservation {
            keypoints: vec![[0.0, 0.0]; NUM_JOINTS],
            confidence: vec![0.0; NUM_JOINTS],
        };
        let view = CameraView {
            intrinsics: Intrinsics::default(),
            crop: CropParams::IDENTITY,
        };
        let r = loss_finetune_baseline(&b.template, &b.prior, &p, &obs, &view, &LossWeights::eq5_finetune_baseline());
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
