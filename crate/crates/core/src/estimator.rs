//! Three-stage per-frame estimator with pluggable refiners.
//!
//! The estimator state keeps τ normalized and in the crop frame. Modes that
//! know the crop ([`EstimatorMode::full_camera`]) lift it to the full camera
//! frame with the crop parameters before projecting; the others project
//! with a fixed [`CropCamera`]. Observations are always in crop pixels.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{self, Real, Var};
use crate::body_model::{
    self, identity_theta, BodyParams, BodyTemplate, BETA_DIM, BETA_RANGE, PARAM_DIM, PHI_RANGE, THETA_DIM,
    THETA_RANGE,
};
use crate::camera::{self, CropCamera, CropParams, Intrinsics, CROP_SIZE};
use crate::error::{Error, Result};
use crate::fusion::codec::StageMessage;
use crate::geom::{rot, V3};
use crate::losses::KeypointObservation;
use crate::optim::{self, LmConfig, ResidualEval};
use crate::pose_prior::{PriorBasis, LATENT_DIM};
use crate::rotation::Rotation6D;
use crate::synthgen::FrameRecord;

pub const NUM_STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Baseline,
    BaselineMultiview,
    BaselineFullcam,
    AirPose,
}

impl EstimatorMode {
    pub const ALL: [EstimatorMode; 4] = [
        EstimatorMode::Baseline,
        EstimatorMode::BaselineMultiview,
        EstimatorMode::BaselineFullcam,
        EstimatorMode::AirPose,
    ];

    /// Whether agents exchange θ/β between stages.
    pub fn exchanges(self) -> bool {
        matches!(self, EstimatorMode::BaselineMultiview | EstimatorMode::AirPose)
    }

    /// Whether the crop parameters are consumed and outputs live in the full
    /// camera frame.
    pub fn full_camera(self) -> bool {
        matches!(self, EstimatorMode::BaselineFullcam | EstimatorMode::AirPose)
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorMode::Baseline => "baseline",
            EstimatorMode::BaselineMultiview => "multiview",
            EstimatorMode::BaselineFullcam => "fullcam",
            EstimatorMode::AirPose => "airpose",
        }
    }
}

impl fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerKind {
    Gradient,
    Oracle,
}

impl FromStr for RefinerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(RefinerKind::Gradient),
            "oracle" => Ok(RefinerKind::Oracle),
            other => Err(Error::Config(format!("unknown refiner {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientRefinerConfig {
    pub lm: LmConfig,
    /// Geman-McClure scale in crop pixels.
    pub sigma: f64,
    pub prior_weight: f64,
    pub beta_weight: f64,
    pub partner_theta_weight: f64,
    pub partner_beta_weight: f64,
    /// Focal length of the crop camera used by modes without crop knowledge.
    pub crop_focal: f64,
    /// Weight on the part of θ − θ_identity outside the prior's span.
    pub off_prior_weight: f64,
    /// Heading hypotheses tried at the first stage; the lowest final cost wins.
    pub yaw_starts: usize,
}

impl Default for GradientRefinerConfig {
    fn default() -> Self {
        GradientRefinerConfig {
            lm: LmConfig::default(),
            sigma: 100.0,
            prior_weight: 5.0,
            beta_weight: 10.0,
            partner_theta_weight: 200.0,
            partner_beta_weight: 200.0,
            crop_focal: 1100.0,
            off_prior_weight: 500.0,
            yaw_starts: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleRefinerConfig {
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for OracleRefinerConfig {
    fn default() -> Self {
        OracleRefinerConfig { alpha: 0.5, sigma: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    pub refiner: RefinerKind,
    pub gradient: GradientRefinerConfig,
    pub oracle: OracleRefinerConfig,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            mode: EstimatorMode::AirPose,
            refiner: RefinerKind::Gradient,
            gradient: GradientRefinerConfig::default(),
            oracle: OracleRefinerConfig::default(),
            seed: 0,
        }
    }
}

/// Everything one refinement stage consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct StageInput {
    /// Detections in crop pixels.
    pub observation: KeypointObservation,
    /// Present only in full-camera modes.
    pub crop: Option<CropParams>,
    pub intrinsics: Intrinsics,
    /// Current estimate, τ normalized and in the crop frame.
    pub current: BodyParams,
    pub partner_theta: Option<Vec<f64>>,
    pub partner_beta: Option<Vec<f64>>,
    pub stage_index: usize,
    /// Target of the oracle refiner, in the same frame as `current`.
    pub ground_truth: Option<BodyParams>,
    pub noise_seed: u64,
}

impl StageInput {
    pub fn validate(&self, mode: EstimatorMode) -> Result<()> {
        if self.stage_index >= NUM_STAGES {
            return Err(Error::Config(format!("stage index {} out of range", self.stage_index)));
        }
        if self.crop.is_some() != mode.full_camera() {
            return Err(Error::Config(format!(
                "crop parameters must be given exactly in full-camera modes (mode {mode})"
            )));
        }
        let has_partner = self.partner_theta.is_some() || self.partner_beta.is_some();
        if has_partner && !mode.exchanges() {
            return Err(Error::Config(format!("mode {mode} takes no partner data")));
        }
        if self.partner_theta.is_some() != self.partner_beta.is_some() {
            return Err(Error::Config("partner θ and β must come together".into()));
        }
        if let Some(t) = &self.partner_theta {
            if t.len() != THETA_DIM {
                return Err(Error::shape("partner theta", THETA_DIM, t.len()));
            }
        }
        if let Some(b) = &self.partner_beta {
            if b.len() != BETA_DIM {
                return Err(Error::shape("partner beta", BETA_DIM, b.len()));
            }
        }
        self.observation.validate()?;
        self.current.validate()
    }
}

/// `β = 0`, identity rotations, normalized `τ = [0, 0, 0.5]` (10 m).
pub fn init_params() -> BodyParams {
    BodyParams {
        tau: [0.0, 0.0, 0.5],
        phi: Rotation6D::IDENTITY,
        theta: identity_theta(),
        beta: vec![0.0; BETA_DIM],
    }
}

/// Estimator state (normalized crop-frame τ) to full-camera-frame parameters.
pub fn state_to_full(state: &BodyParams, crop: &CropParams, k: &Intrinsics) -> Result<BodyParams> {
    Ok(BodyParams {
        tau: camera::crop_to_full(camera::tau_denormalize(state.tau), crop, k)?,
        ..state.clone()
    })
}

/// Inverse of [`state_to_full`].
pub fn full_to_state(full: &BodyParams, crop: &CropParams, k: &Intrinsics) -> Result<BodyParams> {
    Ok(BodyParams {
        tau: camera::tau_normalize(camera::full_to_crop(full.tau, crop, k)?),
        ..full.clone()
    })
}

/// One refinement step.
pub fn refine_stage(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    input: &StageInput,
    cfg: &EstimatorConfig,
) -> Result<BodyParams> {
    input.validate(cfg.mode)?;
    match cfg.refiner {
        RefinerKind::Gradient => gradient_refine(tpl, prior, input, cfg.mode, &cfg.gradient).map(|(p, _)| p),
        RefinerKind::Oracle => oracle_refine(input, &cfg.oracle),
    }
}

fn oracle_refine(input: &StageInput, cfg: &OracleRefinerConfig) -> Result<BodyParams> {
    let Some(gt) = &input.ground_truth else {
        return Err(Error::Config("oracle refiner needs ground truth".into()));
    };
    gt.validate()?;
    let mut x = input.current.to_flat();
    if let (Some(pt), Some(pb)) = (&input.partner_theta, &input.partner_beta) {
        for (v, p) in x[THETA_RANGE].iter_mut().zip(pt) {
            *v = 0.5 * *v + 0.5 * p;
        }
        for (v, p) in x[BETA_RANGE].iter_mut().zip(pb) {
            *v = 0.5 * *v + 0.5 * p;
        }
    }
    let target = gt.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(input.noise_seed);
    let noise = (cfg.sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;
    for (v, g) in x.iter_mut().zip(&target) {
        *v += cfg.alpha * (g - *v);
        if let Some(n) = &noise {
            *v += n.sample(&mut rng);
        }
    }
    BodyParams::from_flat(&x)
}

/// Per-step costs of one gradient-refiner call.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineTrace {
    pub costs: Vec<f64>,
}

fn to_crop_pixel<T: Real>(uv: [T; 2], p: &CropParams, k: &Intrinsics) -> [T; 2] {
    let c = p.center(k);
    [
        (uv[0] - c[0]) / p.s + CROP_SIZE / 2.0,
        (uv[1] - c[1]) / p.s + CROP_SIZE / 2.0,
    ]
}

/// Projected joints in crop pixels for a flat state.
fn crop_projection<T: Real>(
    tpl: &BodyTemplate,
    x: &[T],
    mode: EstimatorMode,
    input: &StageInput,
    crop_cam: &Intrinsics,
) -> Result<Vec<[T; 2]>> {
    let tau_c = V3::from_slice(&x[0..3]).scale_f(camera::TAU_SCALE);
    let posed_at = |tau: &V3<T>| body_model::pose(tpl, &tau.0, &x[PHI_RANGE], &x[THETA_RANGE], &x[BETA_RANGE], false);
    if mode.full_camera() {
        let crop = input.crop.as_ref().expect("validated");
        let tau = camera::crop_to_full_generic(&tau_c, crop, &input.intrinsics)?;
        posed_at(&tau)?
            .joints
            .iter()
            .map(|j| camera::project_generic(j, &input.intrinsics).map(|uv| to_crop_pixel(uv, crop, &input.intrinsics)))
            .collect()
    } else {
        posed_at(&tau_c)?
            .joints
            .iter()
            .map(|j| camera::project_generic(j, crop_cam))
            .collect()
    }
}

/// Robust reprojection residual whose square is the Geman-McClure penalty.
fn robust_residual<T: Real>(d: T, sigma: f64) -> T {
    d * sigma / (d * d + sigma * sigma).sqrt()
}

/// Residual vector and Jacobian of the per-frame objective
/// `Σ wⱼ ρ(uⱼ − ûⱼ) + w_p‖ℰ(θ)‖² + w_b‖β‖² [+ w_θ‖θ − θ'‖² + w_β‖β − β'‖²]`.
fn residuals(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    x: &[f64],
    input: &StageInput,
    mode: EstimatorMode,
    cfg: &GradientRefinerConfig,
    want_jac: bool,
) -> Result<ResidualEval> {
    let crop_cam = CropCamera { focal: cfg.crop_focal }.intrinsics();
    let obs = &input.observation;
    let active: Vec<usize> = (0..obs.confidence.len()).filter(|&j| obs.confidence[j] > 0.0).collect();
    let reproj = |x: &[Var]| -> Result<Vec<Var>> {
        let uv = crop_projection(tpl, x, mode, input, &crop_cam)?;
        let mut out = Vec::with_capacity(2 * active.len());
        for &j in &active {
            let w = obs.confidence[j].sqrt();
            for a in 0..2 {
                out.push(robust_residual(uv[j][a] - obs.keypoints[j][a], cfg.sigma) * w);
            }
        }
        Ok(out)
    };

    let (mut r, rows) = if want_jac {
        let (vals, rows) = ad::jacobian(x, reproj)?;
        (vals, Some(rows))
    } else {
        let uv = crop_projection(tpl, x, mode, input, &crop_cam)?;
        let mut out = Vec::with_capacity(2 * active.len());
        for &j in &active {
            let w = obs.confidence[j].sqrt();
            for a in 0..2 {
                out.push(robust_residual(uv[j][a] - obs.keypoints[j][a], cfg.sigma) * w);
            }
        }
        (out, None)
    };
    let n_reproj = r.len();

    let theta = &x[THETA_RANGE];
    let beta = &x[BETA_RANGE];
    let sp = cfg.prior_weight.sqrt();
    r.extend(prior.encode_generic(theta).iter().map(|v| v * sp));
    let sb = cfg.beta_weight.sqrt();
    r.extend(beta.iter().map(|v| v * sb));
    let partner = input.partner_theta.as_ref().zip(input.partner_beta.as_ref());
    let (st, spb) = (cfg.partner_theta_weight.sqrt(), cfg.partner_beta_weight.sqrt());
    if let Some((pt, pb)) = partner {
        r.extend(theta.iter().zip(pt).map(|(a, b)| (a - b) * st));
        r.extend(beta.iter().zip(pb).map(|(a, b)| (a - b) * spb));
    }
    let so = cfg.off_prior_weight.sqrt();
    let off_start = r.len();
    if so > 0.0 {
        let back = prior.decode_slice(&prior.encode_generic(theta));
        r.extend(theta.iter().zip(&back).map(|(t, b)| (t - b) * so));
    }

    let jac = rows.map(|rows| {
        let mut m = DMatrix::<f64>::zeros(r.len(), PARAM_DIM);
        for (i, row) in rows.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                m[(i, k)] = *v;
            }
        }
        let mut i = n_reproj;
        for kk in 0..LATENT_DIM {
            for (t, drow) in prior.decoder.iter().enumerate() {
                m[(i, THETA_RANGE.start + t)] = drow[kk] * sp;
            }
            i += 1;
        }
        for b in 0..BETA_DIM {
            m[(i, BETA_RANGE.start + b)] = sb;
            i += 1;
        }
        if partner.is_some() {
            for t in 0..THETA_DIM {
                m[(i, THETA_RANGE.start + t)] = st;
                i += 1;
            }
            for b in 0..BETA_DIM {
                m[(i, BETA_RANGE.start + b)] = spb;
                i += 1;
            }
        }
        debug_assert_eq!(i, off_start);
        if so > 0.0 {
            // so·(I − DDᵀ)
            for a in 0..THETA_DIM {
                for b in 0..THETA_DIM {
                    let ddt: f64 = prior.decoder[a].iter().zip(&prior.decoder[b]).map(|(x, y)| x * y).sum();
                    let eye = if a == b { 1.0 } else { 0.0 };
                    m[(off_start + a, THETA_RANGE.start + b)] = so * (eye - ddt);
                }
            }
        }
        m
    });
    Ok((r, jac))
}

/// Value of the gradient refiner's per-frame objective at `params`.
pub fn stage_objective(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    params: &BodyParams,
    input: &StageInput,
    mode: EstimatorMode,
    cfg: &GradientRefinerConfig,
) -> Result<f64> {
    let (r, _) = residuals(tpl, prior, &params.to_flat(), input, mode, cfg, false)?;
    Ok(r.iter().map(|v| v * v).sum())
}

/// Damped Gauss-Newton steps on the per-frame objective; every accepted step
/// strictly lowers it.
pub fn gradient_refine(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    input: &StageInput,
    mode: EstimatorMode,
    cfg: &GradientRefinerConfig,
) -> Result<(BodyParams, RefineTrace)> {
    input.validate(mode)?;
    let starts = if input.stage_index == 0 { cfg.yaw_starts.max(1) } else { 1 };
    let phi0 = input.current.phi.decode()?;
    let mut best: Option<(Vec<f64>, optim::LmTrace)> = None;
    for k in 0..starts {
        let mut x0 = input.current.clone();
        if k > 0 {
            let yaw = rot::axis_angle([0.0, 1.0, 0.0], 2.0 * std::f64::consts::PI * k as f64 / starts as f64);
            x0.phi = Rotation6D::encode(&rot::mul(&phi0, &yaw))?;
        }
        let (x, trace) = optim::levenberg_marquardt(
            &x0.to_flat(),
            |x, jac| residuals(tpl, prior, x, input, mode, cfg, jac),
            &cfg.lm,
        )?;
        let cost = |t: &optim::LmTrace| t.costs.last().copied().unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(_, b)| cost(&trace) < cost(b)) {
            best = Some((x, trace));
        }
    }
    let (x, trace) = best.expect("at least one start");
    let out = BodyParams::from_flat(&x)?;
    out.validate()?;
    Ok((out, RefineTrace { costs: trace.costs }))
}

/// One agent's view of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub frame_id: u64,
    /// Detections in crop pixels.
    pub observation: KeypointObservation,
    pub crop: CropParams,
    pub intrinsics: Intrinsics,
    /// Full-camera-frame ground truth, consumed only by the oracle refiner.
    pub ground_truth: Option<BodyParams>,
}

impl FrameInput {
    /// Camera `c`'s view of a dataset frame; ground truth is attached only
    /// when `with_ground_truth` (oracle refiner).
    pub fn from_record(rec: &FrameRecord, c: usize, with_ground_truth: bool) -> Result<FrameInput> {
        let cam = rec
            .cameras
            .get(c)
            .ok_or_else(|| Error::Dataset(format!("frame {} has no camera {c}", rec.frame_id)))?;
        Ok(FrameInput {
            frame_id: rec.frame_id,
            observation: cam.crop_observation(),
            crop: cam.crop,
            intrinsics: cam.intrinsics,
            ground_truth: with_ground_truth.then(|| rec.camera_ground_truth_params(c)),
        })
    }
}

/// Deterministic per-(seed, agent, frame, stage) noise seed.
pub fn noise_seed(seed: u64, agent: usize, frame_id: u64, stage: usize) -> u64 {
    let mut z = seed
        ^ (agent as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ frame_id.wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (stage as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// What an agent produced in response to an event.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentOutput {
    pub sent: Vec<StageMessage>,
    /// Final estimate (estimator state frame) when the frame is finished.
    pub done: Option<BodyParams>,
}

#[derive(Clone, Debug)]
enum AgentState {
    Idle,
    Waiting {
        frame: FrameInput,
        current: BodyParams,
        next_stage: usize,
    },
}

/// One agent's estimator as an event-driven state machine. It never sees
/// the partner's observations, only its [`StageMessage`]s.
#[derive(Clone, Debug)]
pub struct Agent {
    pub id: usize,
    cfg: EstimatorConfig,
    state: AgentState,
}

impl Agent {
    pub fn new(id: usize, cfg: EstimatorConfig) -> Self {
        Agent {
            id,
            cfg,
            state: AgentState::Idle,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn is_idle(&self) -> bool {
        matches!(self.state, AgentState::Idle)
    }

    /// Drops any in-flight frame.
    pub fn abort(&mut self) {
        self.state = AgentState::Idle;
    }

    fn stage(
        &self,
        tpl: &BodyTemplate,
        prior: &PriorBasis,
        frame: &FrameInput,
        current: &BodyParams,
        stage: usize,
        partner: Option<&StageMessage>,
    ) -> Result<BodyParams> {
        let mode = self.cfg.mode;
        let ground_truth = frame
            .ground_truth
            .as_ref()
            .map(|g| full_to_state(g, &frame.crop, &frame.intrinsics))
            .transpose()?;
        let input = StageInput {
            observation: frame.observation.clone(),
            crop: mode.full_camera().then_some(frame.crop),
            intrinsics: frame.intrinsics,
            current: current.clone(),
            partner_theta: partner.map(|m| m.theta_f64()),
            partner_beta: partner.map(|m| m.beta_f64()),
            stage_index: stage,
            ground_truth,
            noise_seed: noise_seed(self.cfg.seed, self.id, frame.frame_id, stage),
        };
        refine_stage(tpl, prior, &input, &self.cfg)
    }

    fn message(frame_id: u64, stage: usize, p: &BodyParams) -> StageMessage {
        StageMessage::from_f64(frame_id, stage as u8, &p.theta, &p.beta)
    }

    /// Starts a frame. With `stale` partner messages (pipelined operation,
    /// or a non-exchanging mode) all three stages run immediately.
    pub fn start_frame(
        &mut self,
        tpl: &BodyTemplate,
        prior: &PriorBasis,
        frame: FrameInput,
        stale: Option<&[StageMessage; 2]>,
    ) -> Result<AgentOutput> {
        if !self.is_idle() {
            return Err(Error::Config(format!("agent {} is busy", self.id)));
        }
        let exchanges = self.cfg.mode.exchanges();
        let mut current = self.stage(tpl, prior, &frame, &init_params(), 0, None)?;
        let mut out = AgentOutput::default();
        if exchanges {
            out.sent.push(Self::message(frame.frame_id, 0, &current));
        }
        if exchanges && stale.is_none() {
            self.state = AgentState::Waiting {
                frame,
                current,
                next_stage: 1,
            };
            return Ok(out);
        }
        for stage in 1..NUM_STAGES {
            let partner = stale.filter(|_| exchanges).map(|m| &m[stage - 1]);
            current = self.stage(tpl, prior, &frame, &current, stage, partner)?;
            if exchanges && stage < NUM_STAGES - 1 {
                out.sent.push(Self::message(frame.frame_id, stage, &current));
            }
        }
        out.done = Some(current);
        Ok(out)
    }

    /// Consumes the partner's message for the stage this agent waits on.
    pub fn receive(&mut self, tpl: &BodyTemplate, prior: &PriorBasis, msg: &StageMessage) -> Result<AgentOutput> {
        let AgentState::Waiting {
            frame,
            current,
            next_stage,
        } = std::mem::replace(&mut self.state, AgentState::Idle)
        else {
            return Err(Error::MalformedMessage(format!("agent {} is not waiting", self.id)));
        };
        msg.validate()?;
        if msg.frame_id != frame.frame_id || msg.stage as usize != next_stage - 1 {
            return Err(Error::MalformedMessage(format!(
                "expected frame {} stage {}, got frame {} stage {}",
                frame.frame_id,
                next_stage - 1,
                msg.frame_id,
                msg.stage
            )));
        }
        let current = self.stage(tpl, prior, &frame, &current, next_stage, Some(msg))?;
        let mut out = AgentOutput::default();
        if next_stage + 1 < NUM_STAGES {
            out.sent.push(Self::message(frame.frame_id, next_stage, &current));
            self.state = AgentState::Waiting {
                frame,
                current,
                next_stage: next_stage + 1,
            };
        } else {
            out.done = Some(current);
        }
        Ok(out)
    }
}

/// Result of [`run_three_stages`].
#[derive(Clone, Debug, PartialEq)]
pub struct StagesOutput {
    /// Final estimate in the estimator state frame.
    pub params: BodyParams,
    pub outbound: Vec<StageMessage>,
}

/// Runs the three stages for one agent. In exchanging modes `exchange` is
/// called with each outbound message and must return the partner's message
/// for the same stage.
pub fn run_three_stages<F>(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    agent: usize,
    frame: FrameInput,
    cfg: &EstimatorConfig,
    mut exchange: F,
) -> Result<StagesOutput>
where
    F: FnMut(&StageMessage) -> Result<StageMessage>,
{
    let mut a = Agent::new(agent, *cfg);
    let mut outbound = Vec::new();
    let mut step = a.start_frame(tpl, prior, frame, None)?;
    loop {
        outbound.extend(step.sent.iter().cloned());
        if let Some(params) = step.done {
            return Ok(StagesOutput { params, outbound });
        }
        let mine = step.sent.last().ok_or(Error::ExchangeTimeout { stage: 0 })?;
        let theirs = exchange(mine)?;
        step = a.receive(tpl, prior, &theirs)?;
    }
}

/// Runs both agents on one frame pair in lockstep, delivering each stage
/// message to the partner as soon as both have produced theirs.
pub fn run_pair(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    frames: [FrameInput; 2],
    cfg: &EstimatorConfig,
) -> Result<[StagesOutput; 2]> {
    let mut agents = [Agent::new(0, *cfg), Agent::new(1, *cfg)];
    let [f0, f1] = frames;
    let mut steps = [
        agents[0].start_frame(tpl, prior, f0, None)?,
        agents[1].start_frame(tpl, prior, f1, None)?,
    ];
    let mut outbound: [Vec<StageMessage>; 2] = [Vec::new(), Vec::new()];
    loop {
        for (o, s) in outbound.iter_mut().zip(&steps) {
            o.extend(s.sent.iter().cloned());
        }
        if let [Some(a), Some(b)] = [&steps[0].done, &steps[1].done] {
            let [o0, o1] = outbound;
            return Ok([
                StagesOutput {
                    params: a.clone(),
                    outbound: o0,
                },
                StagesOutput {
                    params: b.clone(),
                    outbound: o1,
                },
            ]);
        }
        let m0 = steps[0].sent.last().cloned().ok_or(Error::ExchangeTimeout { stage: 0 })?;
        let m1 = steps[1].sent.last().cloned().ok_or(Error::ExchangeTimeout { stage: 0 })?;
        steps = [
            agents[0].receive(tpl, prior, &m1)?,
            agents[1].receive(tpl, prior, &m0)?,
        ];
    }
}
