//! Procedural multi-view sequences with ground truth.
//!
//! World frame is Z-up with the ground at `z = 0`. Cameras orbit the origin
//! at roughly `camera_distance`, look at `(0, 0, look_at_height)` and use the
//! usual camera axes (`x` right, `y` down, `z` forward). Angles are radians,
//! lengths meters, image quantities pixels.

use std::f64::consts::{FRAC_PI_4, PI};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body_model::{self, BodyParams, BETA_DIM, NUM_JOINTS};
use crate::bundle::ModelBundle;
use crate::camera::{self, CameraPose, CropParams, Intrinsics};
use crate::error::{Error, Result};
use crate::geom::rot::{self, Mat3};
use crate::losses::{GroundTruth, KeypointObservation};
use crate::pose_prior::LATENT_DIM;
use crate::rotation::Rotation6D;

pub const SCHEMA: &str = "aerocap-frames/1";
/// Strict gating threshold between the two detectors, pixels.
pub const DEFAULT_GATE_PX: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionPattern {
    Hover,
    /// Constant angular rate about the vertical axis through the origin.
    Orbit { rate: f64 },
    /// Brownian azimuth, pitch and distance; `std` per √s.
    RandomWalk { azimuth_std: f64, pitch_std: f64, distance_std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    /// Half-width of the square the person moves in.
    pub person_range: f64,
    /// Random-walk std of the person position per √s.
    pub person_step_std: f64,
    pub pelvis_height: f64,
    /// Random-walk std of the person heading per √s.
    pub heading_step_std: f64,
    /// Initial heading is the cameras' mean azimuth ± this.
    pub facing_spread: f64,
    pub camera_distance: f64,
    /// Per-camera distance drawn uniformly within ± this of the mean.
    pub camera_distance_jitter: f64,
    pub pitch_range: [f64; 2],
    /// Azimuth gap between consecutive cameras, drawn uniformly.
    pub camera_separation: [f64; 2],
    pub look_at_height: f64,
    pub motion: Vec<MotionPattern>,
    pub intrinsics: Intrinsics,
    /// Stationary std of each latent pose coordinate.
    pub pose_std: f64,
    /// Mean-reversion time constant of the latent pose, seconds.
    pub pose_time_constant: f64,
    /// Shape std; the default subject has the mean shape, since body scale
    /// and depth are not separable from keypoints alone.
    pub beta_std: f64,
    /// Relative padding of the keypoint bounding box.
    pub box_padding: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 100,
            fps: 40.0,
            seed: 0,
            person_range: 2.75,
            person_step_std: 0.3,
            pelvis_height: 0.95,
            heading_step_std: 0.1,
            facing_spread: FRAC_PI_4,
            camera_distance: 10.0,
            camera_distance_jitter: 1.0,
            pitch_range: [0.0, FRAC_PI_4],
            camera_separation: [PI / 6.0, PI / 2.0],
            look_at_height: 1.0,
            motion: vec![MotionPattern::Hover, MotionPattern::Orbit { rate: 0.05 }],
            intrinsics: Intrinsics::default(),
            pose_std: 0.3,
            pose_time_constant: 1.0,
            beta_std: 0.0,
            box_padding: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames == 0 {
            return bad("frames must be at least 1");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.motion.is_empty() {
            return bad("at least one camera is required");
        }
        if !(self.person_range >= 0.0 && self.person_range <= 2.75) {
            return bad("person range must lie in [0, 2.75] m");
        }
        let [p0, p1] = self.pitch_range;
        if !(0.0 <= p0 && p0 <= p1 && p1 <= FRAC_PI_4 + 1e-12) {
            return bad("pitch range must lie within [0, π/4]");
        }
        if !(self.camera_distance - self.camera_distance_jitter > self.person_range * 2f64.sqrt() + 1.0) {
            return bad("cameras must stay outside the person area");
        }
        let [s0, s1] = self.camera_separation;
        if !(0.0 <= s0 && s0 <= s1) {
            return bad("invalid camera separation range");
        }
        let nonneg = [
            self.person_step_std,
            self.heading_step_std,
            self.facing_spread,
            self.camera_distance_jitter,
            self.pose_std,
            self.beta_std,
            self.box_padding,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) || !(self.pose_time_constant > 0.0) {
            return bad("scene spreads must be nonnegative");
        }
        self.intrinsics.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub keypoint_sigma_px: f64,
    /// Per-camera probability that a joint is occluded.
    pub occlusion_prob: Vec<f64>,
    /// Std of the displacement applied to occluded detections.
    pub occluded_offset_px: f64,
    pub visible_confidence: [f64; 2],
    pub occluded_confidence: [f64; 2],
    /// Noise of the second detector used for gating.
    pub secondary_sigma_px: f64,
    pub gate_threshold_px: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            keypoint_sigma_px: 2.0,
            occlusion_prob: vec![0.0, 0.0],
            occluded_offset_px: 60.0,
            visible_confidence: [0.6, 1.0],
            occluded_confidence: [0.0, 0.3],
            secondary_sigma_px: 2.0,
            gate_threshold_px: DEFAULT_GATE_PX,
        }
    }
}

impl NoiseConfig {
    /// Exact detections, nothing occluded.
    pub fn noiseless(cameras: usize) -> Self {
        NoiseConfig {
            keypoint_sigma_px: 0.0,
            occlusion_prob: vec![0.0; cameras],
            secondary_sigma_px: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self, cameras: usize) -> Result<()> {
        if self.occlusion_prob.len() != cameras {
            return Err(Error::shape("occlusion probabilities", cameras, self.occlusion_prob.len()));
        }
        if self.occlusion_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("occlusion probabilities must lie in [0, 1]".into()));
        }
        for [lo, hi] in [self.visible_confidence, self.occluded_confidence] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config("confidence ranges must lie in [0, 1]".into()));
            }
        }
        let nonneg = [
            self.keypoint_sigma_px,
            self.occluded_offset_px,
            self.secondary_sigma_px,
            self.gate_threshold_px,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("noise scales must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub intrinsics: Intrinsics,
    pub pose: CameraPose,
    pub crop: CropParams,
    /// Gated detections in full-image pixels.
    pub keypoints: KeypointObservation,
    /// Root translation in this camera's frame.
    pub tau_gt: [f64; 3],
    /// Root rotation in this camera's frame.
    pub phi_gt: Rotation6D,
}

impl CameraFrame {
    /// Detections mapped into crop pixels.
    pub fn crop_observation(&self) -> KeypointObservation {
        KeypointObservation {
            keypoints: self
                .keypoints
                .keypoints
                .iter()
                .map(|&uv| self.crop.to_crop_pixel(&self.intrinsics, uv))
                .collect(),
            confidence: self.keypoints.confidence.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub schema: String,
    pub frame_id: u64,
    /// Nanoseconds on the capture clock.
    pub shutter_timestamp: u64,
    pub cameras: Vec<CameraFrame>,
    /// World-frame ground truth.
    pub ground_truth: BodyParams,
}

impl FrameRecord {
    /// Ground truth relative to camera `c`.
    pub fn camera_ground_truth(&self, c: usize) -> GroundTruth {
        let cam = &self.cameras[c];
        GroundTruth {
            tau: cam.tau_gt,
            phi: cam.phi_gt,
            theta: self.ground_truth.theta.clone(),
            beta: self.ground_truth.beta.clone(),
        }
    }

    pub fn camera_ground_truth_params(&self, c: usize) -> BodyParams {
        self.camera_ground_truth(c).as_params()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Dataset(format!("unsupported schema {:?}", self.schema)));
        }
        if self.cameras.is_empty() {
            return Err(Error::Dataset(format!("frame {} has no cameras", self.frame_id)));
        }
        self.ground_truth.validate()?;
        for c in &self.cameras {
            c.keypoints.validate()?;
            c.intrinsics.validate()?;
            if !(c.crop.s > 0.0) {
                return Err(Error::Dataset(format!("frame {}: non-positive crop scale", self.frame_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn num_cameras(&self) -> usize {
        self.frames.first().map_or(0, |f| f.cameras.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        let n = self.num_cameras();
        let mut prev = None;
        for f in &self.frames {
            f.validate()?;
            if f.cameras.len() != n {
                return Err(Error::Dataset(format!("frame {} has {} cameras, expected {n}", f.frame_id, f.cameras.len())));
            }
            if prev.is_some_and(|p| f.shutter_timestamp < p) {
                return Err(Error::Dataset("timestamps must be nondecreasing".into()));
            }
            prev = Some(f.shutter_timestamp);
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for f in &self.frames {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Dataset> {
        let mut frames = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: FrameRecord =
                serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
            frames.push(f);
        }
        let d = Dataset { frames };
        d.validate()?;
        Ok(d)
    }

    pub fn frame(&self, frame_id: u64) -> Option<&FrameRecord> {
        self.frames
            .binary_search_by_key(&frame_id, |f| f.frame_id)
            .ok()
            .map(|i| &self.frames[i])
            .or_else(|| self.frames.iter().find(|f| f.frame_id == frame_id))
    }
}

/// World→camera extrinsic of a camera at `center` looking at `target`.
pub fn look_at(center: [f64; 3], target: [f64; 3]) -> CameraPose {
    let f = normalize(rot::sub(&target, &center));
    let x = normalize(cross(f, [0.0, 0.0, 1.0]));
    let y = cross(f, x);
    let r: Mat3 = [x, y, f];
    let t = rot::apply(&r, &center).map(|v| -v);
    CameraPose {
        rotation: r,
        translation: t,
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = rot::norm(&v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Body→world rotation of an upright person facing azimuth `h`.
pub fn upright_rotation(h: f64) -> Mat3 {
    let (s, c) = h.sin_cos();
    // columns: body x, body y (feet, world down), body z (behind the person)
    [[-s, 0.0, -c], [c, 0.0, -s], [0.0, -1.0, 0.0]]
}

#[derive(Clone, Copy, Debug)]
struct CameraTrack {
    azimuth: f64,
    pitch: f64,
    distance: f64,
}

impl CameraTrack {
    fn center(&self, height: f64) -> [f64; 3] {
        let (sa, ca) = self.azimuth.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        [
            self.distance * cp * ca,
            self.distance * cp * sa,
            height + self.distance * sp,
        ]
    }
}

/// Joints whose detections disagree by more than `threshold_px` get zero
/// confidence; a disagreement of exactly the threshold is kept.
pub fn gate_keypoints(
    primary: &KeypointObservation,
    secondary: &KeypointObservation,
    threshold_px: f64,
) -> Result<KeypointObservation> {
    if primary.keypoints.len() != secondary.keypoints.len() {
        return Err(Error::shape("secondary keypoints", primary.keypoints.len(), secondary.keypoints.len()));
    }
    let mut out = primary.clone();
    for (j, (a, b)) in primary.keypoints.iter().zip(&secondary.keypoints).enumerate() {
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if d > threshold_px {
            out.confidence[j] = 0.0;
        }
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    } else {
        0.0
    }
}

/// Generates a sequence; a pure function of the configs and the model.
pub fn generate_sequence(scene: &SceneConfig, noise: &NoiseConfig, model: &ModelBundle) -> Result<Dataset> {
    scene.validate()?;
    let n_cams = scene.motion.len();
    noise.validate(n_cams)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let dt = 1.0 / scene.fps;
    let sqdt = dt.sqrt();

    let mut tracks = Vec::with_capacity(n_cams);
    let mut azimuth = rng.random_range(-PI..PI);
    for _ in 0..n_cams {
        tracks.push(CameraTrack {
            azimuth,
            pitch: uniform(&mut rng, scene.pitch_range),
            distance: scene.camera_distance
                + uniform(&mut rng, [-scene.camera_distance_jitter, scene.camera_distance_jitter]),
        });
        azimuth += uniform(&mut rng, scene.camera_separation);
    }
    let mean_azimuth = tracks.iter().map(|t| t.azimuth).sum::<f64>() / n_cams as f64;
    let mut heading = mean_azimuth + uniform(&mut rng, [-scene.facing_spread, scene.facing_spread]);
    let r = scene.person_range;
    let mut pos = [uniform(&mut rng, [-r, r]), uniform(&mut rng, [-r, r])];
    let beta: Vec<f64> = (0..BETA_DIM).map(|_| gauss(&mut rng, scene.beta_std)).collect();
    let decay = (-dt / scene.pose_time_constant).exp();
    let innov = scene.pose_std * (1.0 - decay * decay).sqrt();
    let mut v: Vec<f64> = (0..LATENT_DIM).map(|_| gauss(&mut rng, scene.pose_std)).collect();
    let target = [0.0, 0.0, scene.look_at_height];

    let mut frames = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        if t > 0 {
            for k in 0..2 {
                pos[k] = (pos[k] + gauss(&mut rng, scene.person_step_std * sqdt)).clamp(-r, r);
            }
            heading += gauss(&mut rng, scene.heading_step_std * sqdt);
            for x in v.iter_mut() {
                *x = decay * *x + gauss(&mut rng, innov);
            }
            for (track, pattern) in tracks.iter_mut().zip(&scene.motion) {
                match *pattern {
                    MotionPattern::Hover => {}
                    MotionPattern::Orbit { rate } => track.azimuth += rate * dt,
                    MotionPattern::RandomWalk {
                        azimuth_std,
                        pitch_std,
                        distance_std,
                    } => {
                        track.azimuth += gauss(&mut rng, azimuth_std * sqdt);
                        track.pitch = (track.pitch + gauss(&mut rng, pitch_std * sqdt))
                            .clamp(scene.pitch_range[0], scene.pitch_range[1]);
                        let lo = scene.camera_distance - scene.camera_distance_jitter;
                        let hi = scene.camera_distance + scene.camera_distance_jitter;
                        track.distance = (track.distance + gauss(&mut rng, distance_std * sqdt)).clamp(lo, hi);
                    }
                }
            }
        }

        let r_wb = upright_rotation(heading);
        let gt = BodyParams {
            tau: [pos[0], pos[1], scene.pelvis_height],
            phi: Rotation6D::encode(&r_wb)?,
            theta: model.prior.decode_slice(&v),
            beta: beta.clone(),
        };
        let world_joints = body_model::joints(&gt, &model.template)?;

        let mut cameras = Vec::with_capacity(n_cams);
        for (c, track) in tracks.iter().enumerate() {
            let pose = look_at(track.center(scene.look_at_height), target);
            let k = scene.intrinsics;
            let tau_gt = pose.world_to_camera(&gt.tau);
            let phi_gt = Rotation6D::encode(&rot::mul(&pose.rotation, &r_wb))?;
            let projected: Vec<[f64; 2]> = world_joints
                .iter()
                .map(|j| camera::project(pose.world_to_camera(j), &k))
                .collect::<Result<_>>()?;

            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &projected {
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            let (x0, y0, side) = camera::squarify(lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]);
            let padded = side * (1.0 + scene.box_padding);
            let pad = (padded - side) / 2.0;
            let crop = camera::crop_params_from_bbox(x0 - pad, y0 - pad, padded, &k)?;

            let mut primary = KeypointObservation {
                keypoints: Vec::with_capacity(NUM_JOINTS),
                confidence: Vec::with_capacity(NUM_JOINTS),
            };
            let mut secondary = primary.clone();
            for p in &projected {
                let occluded = noise.occlusion_prob[c] > 0.0 && rng.random_bool(noise.occlusion_prob[c]);
                let (kp, kp2, w) = if occluded {
                    let off = noise.occluded_offset_px;
                    (
                        [p[0] + gauss(&mut rng, off), p[1] + gauss(&mut rng, off)],
                        [p[0] + gauss(&mut rng, off), p[1] + gauss(&mut rng, off)],
                        uniform(&mut rng, noise.occluded_confidence),
                    )
                } else {
                    let s = noise.keypoint_sigma_px;
                    let s2 = noise.secondary_sigma_px;
                    (
                        [p[0] + gauss(&mut rng, s), p[1] + gauss(&mut rng, s)],
                        [p[0] + gauss(&mut rng, s2), p[1] + gauss(&mut rng, s2)],
                        uniform(&mut rng, noise.visible_confidence),
                    )
                };
                primary.keypoints.push(kp);
                primary.confidence.push(w);
                secondary.keypoints.push(kp2);
                secondary.confidence.push(w);
            }
            let keypoints = gate_keypoints(&primary, &secondary, noise.gate_threshold_px)?;
            cameras.push(CameraFrame {
                intrinsics: k,
                pose,
                crop,
                keypoints,
                tau_gt,
                phi_gt,
            });
        }
        frames.push(FrameRecord {
            schema: SCHEMA.to_string(),
            frame_id: t as u64,
            shutter_timestamp: (t as f64 * 1e9 / scene.fps).round() as u64,
            cameras,
            ground_truth: gt,
        });
    }
    Ok(Dataset { frames })
}

/// Noise-free detections of `gt` in camera `pose`, full-image pixels.
pub fn project_ground_truth(gt: &BodyParams, pose: &CameraPose, k: &Intrinsics, model: &ModelBundle) -> Result<Vec<[f64; 2]>> {
    body_model::joints(gt, &model.template)?
        .iter()
        .map(|j| camera::project(pose.world_to_camera(j), k))
        .collect()
}
