//! Offline whole-sequence refinement over one shared shape, one latent pose
//! per frame and per-camera root rotation and translation.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyParams, BETA_DIM};
use crate::error::{Error, Result};
use crate::geom::rot::{self, Mat3};
use crate::losses::{self, LossBreakdown, LossWeights, RobustConfig, ViewObservation};
use crate::optim::{self, LbfgsConfig, StopReason};
use crate::pose_prior::{LatentPose, PriorBasis, LATENT_DIM};
use crate::rotation::Rotation6D;
use crate::body_model::BodyTemplate;
use crate::synthgen::Dataset;

/// Root rotation and full-camera-frame translation of one camera at one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRoot {
    pub phi: Rotation6D,
    pub tau: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceFrame {
    pub frame_id: u64,
    pub v: LatentPose,
    pub cameras: Vec<CameraRoot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEstimate {
    pub beta: Vec<f64>,
    pub frames: Vec<SequenceFrame>,
}

impl SequenceEstimate {
    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != BETA_DIM {
            return Err(Error::shape("beta", BETA_DIM, self.beta.len()));
        }
        let Some(first) = self.frames.first() else {
            return Err(Error::EmptySequence);
        };
        let n_cams = first.cameras.len();
        if n_cams == 0 {
            return Err(Error::shape("cameras", 2, 0));
        }
        for f in &self.frames {
            if f.v.0.len() != LATENT_DIM {
                return Err(Error::shape("latent pose", LATENT_DIM, f.v.0.len()));
            }
            if f.cameras.len() != n_cams {
                return Err(Error::shape("cameras", n_cams, f.cameras.len()));
            }
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteObjective { frame: None });
        }
        Ok(())
    }

    pub fn num_cameras(&self) -> usize {
        self.frames.first().map_or(0, |f| f.cameras.len())
    }

    pub fn flat_len(&self) -> usize {
        BETA_DIM + self.frames.len() * (LATENT_DIM + 9 * self.num_cameras())
    }

    /// `β`, then every `v_t`, then `(φ, τ)` per frame per camera.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.flat_len());
        x.extend_from_slice(&self.beta);
        for f in &self.frames {
            x.extend_from_slice(&f.v.0);
        }
        for f in &self.frames {
            for c in &f.cameras {
                x.extend_from_slice(&c.phi.0);
                x.extend_from_slice(&c.tau);
            }
        }
        x
    }

    /// A copy of `self` with the values of `x` (layout of [`Self::to_flat`]).
    pub fn with_flat(&self, x: &[f64]) -> Result<SequenceEstimate> {
        if x.len() != self.flat_len() {
            return Err(Error::shape("flat sequence", self.flat_len(), x.len()));
        }
        let mut out = self.clone();
        out.beta.copy_from_slice(&x[..BETA_DIM]);
        let mut o = BETA_DIM;
        for f in out.frames.iter_mut() {
            f.v.0.copy_from_slice(&x[o..o + LATENT_DIM]);
            o += LATENT_DIM;
        }
        for f in out.frames.iter_mut() {
            for c in f.cameras.iter_mut() {
                c.phi.0.copy_from_slice(&x[o..o + 6]);
                c.tau.copy_from_slice(&x[o + 6..o + 9]);
                o += 9;
            }
        }
        Ok(out)
    }

    /// Full parameters of camera `c` at frame `t`.
    pub fn camera_params(&self, t: usize, c: usize, prior: &PriorBasis) -> BodyParams {
        let f = &self.frames[t];
        BodyParams {
            tau: f.cameras[c].tau,
            phi: f.cameras[c].phi,
            theta: prior.decode_slice(&f.v.0),
            beta: self.beta.clone(),
        }
    }

    /// Per-frame, per-camera parameters for every frame.
    /// Decoded per-frame, per-camera parameters.
    pub fn frame_estimates(&self, prior: &PriorBasis) -> Vec<FrameEstimate> {
        self.frames
            .iter()
            .enumerate()
            .map(|(t, f)| FrameEstimate {
                frame_id: f.frame_id,
                cameras: (0..f.cameras.len()).map(|c| self.camera_params(t, c, prior)).collect(),
            })
            .collect()
    }

    pub fn all_params(&self, prior: &PriorBasis) -> Vec<Vec<BodyParams>> {
        (0..self.frames.len())
            .map(|t| (0..self.num_cameras()).map(|c| self.camera_params(t, c, prior)).collect())
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            frame_id: u64,
            beta: &'a [f64],
            v: &'a LatentPose,
            cameras: &'a [CameraRoot],
        }
        for f in &self.frames {
            let line = Line {
                frame_id: f.frame_id,
                beta: &self.beta,
                v: &f.v,
                cameras: &f.cameras,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Per-frame estimates of one frame, one entry per camera, full camera frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEstimate {
    pub frame_id: u64,
    pub cameras: Vec<BodyParams>,
}

pub fn write_frame_estimates_jsonl<W: Write>(estimates: &[FrameEstimate], mut w: W) -> Result<()> {
    for e in estimates {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_frame_estimates_jsonl<R: BufRead>(r: R) -> Result<Vec<FrameEstimate>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: FrameEstimate =
            serde_json::from_str(&line).map_err(|err| Error::Dataset(format!("line {}: {err}", i + 1)))?;
        for p in &e.cameras {
            p.validate()?;
        }
        out.push(e);
    }
    Ok(out)
}

/// Full-image detections of every frame and camera of a dataset.
pub fn dataset_observations(d: &Dataset) -> Vec<Vec<ViewObservation>> {
    d.frames
        .iter()
        .map(|f| {
            f.cameras
                .iter()
                .map(|c| ViewObservation { intrinsics: c.intrinsics, keypoints: c.keypoints.clone() })
                .collect()
        })
        .collect()
}

/// Shape is the mean over all frames and cameras, the latent pose encodes
/// the mean of the cameras' θ, and root parameters are copied.
pub fn init_from_airpose(frames: &[FrameEstimate], prior: &PriorBasis) -> Result<SequenceEstimate> {
    let Some(first) = frames.first() else {
        return Err(Error::EmptySequence);
    };
    let n_cams = first.cameras.len();
    let mut beta = vec![0.0; BETA_DIM];
    let mut count = 0.0;
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        if f.cameras.len() != n_cams || n_cams == 0 {
            return Err(Error::shape("cameras", n_cams.max(1), f.cameras.len()));
        }
        let mut mean_theta = vec![0.0; f.cameras[0].theta.len()];
        for p in &f.cameras {
            p.validate()?;
            for (b, v) in beta.iter_mut().zip(&p.beta) {
                *b += v;
            }
            count += 1.0;
            for (m, v) in mean_theta.iter_mut().zip(&p.theta) {
                *m += v / n_cams as f64;
            }
        }
        out.push(SequenceFrame {
            frame_id: f.frame_id,
            v: prior.encode(&mean_theta)?,
            cameras: f
                .cameras
                .iter()
                .map(|p| CameraRoot {
                    phi: p.phi,
                    tau: p.tau,
                })
                .collect(),
        });
    }
    for b in beta.iter_mut() {
        *b /= count;
    }
    Ok(SequenceEstimate { beta, frames: out })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub optimizer: LbfgsConfig,
    pub weights: LossWeights,
    pub robust: RobustConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            optimizer: LbfgsConfig::default(),
            weights: LossWeights::eq8_airpose_plus(),
            robust: RobustConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights.validate()?;
        if !(self.robust.sigma > 0.0) || !(self.robust.conf_threshold >= 0.0) {
            return Err(Error::Config("sigma must be positive and the threshold nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub estimate: SequenceEstimate,
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub final_breakdown: LossBreakdown,
}

/// Minimizes the sequence objective from `seq`.
pub fn refine(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    seq: &SequenceEstimate,
    obs: &[Vec<ViewObservation>],
    cfg: &OptimizerConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    losses::check_sequence(seq, obs)?;
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let s = seq.with_flat(x)?;
        losses::grad_airpose_plus(tpl, prior, &s, obs, &cfg.weights, &cfg.robust)
    };
    let (x, trace) = optim::lbfgs(&seq.to_flat(), objective, &cfg.optimizer)?;
    let estimate = seq.with_flat(&x)?;
    let final_breakdown = losses::loss_airpose_plus(tpl, prior, &estimate, obs, &cfg.weights, &cfg.robust)?;
    log::debug!(
        "sequence refinement: {} iterations, loss {:.6e} -> {:.6e} ({:?})",
        trace.iterations,
        trace.losses[0],
        trace.losses.last().copied().unwrap_or(f64::NAN),
        trace.stop
    );
    Ok(RefineOutcome {
        estimate,
        losses: trace.losses,
        iterations: trace.iterations,
        stop: trace.stop,
        final_breakdown,
    })
}

/// Pose of camera 2 expressed in camera 1's frame at one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub frame_id: u64,
    pub rotation: Mat3,
    /// Camera 2's center in camera 1 coordinates.
    pub translation: [f64; 3],
}

impl RelativePose {
    /// `[w, x, y, z]`, with `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let m = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        let mut v = [q.w, q.i, q.j, q.k];
        if v[0] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    }
}

/// Composes camera-1-from-body with body-from-camera-2 per frame.
pub fn relative_camera_trajectory(seq: &SequenceEstimate) -> Result<Vec<RelativePose>> {
    if seq.num_cameras() < 2 {
        return Err(Error::shape("cameras", 2, seq.num_cameras()));
    }
    seq.frames
        .iter()
        .map(|f| {
            let (c1, c2) = (&f.cameras[0], &f.cameras[1]);
            let r1 = c1.phi.decode()?;
            let r2 = c2.phi.decode()?;
            let r = rot::mul(&r1, &rot::transpose(&r2));
            let t = rot::sub(&c1.tau, &rot::apply(&r, &c2.tau));
            Ok(RelativePose {
                frame_id: f.frame_id,
                rotation: r,
                translation: t,
            })
        })
        .collect()
}

pub fn write_trajectory_csv<W: Write>(poses: &[RelativePose], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "x", "y", "z", "qw", "qx", "qy", "qz"])?;
    for p in poses {
        let q = p.quaternion();
        let row = [
            p.frame_id.to_string(),
            p.translation[0].to_string(),
            p.translation[1].to_string(),
            p.translation[2].to_string(),
            q[0].to_string(),
            q[1].to_string(),
            q[2].to_string(),
            q[3].to_string(),
        ];
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_loss_trace_csv<W: Write>(losses: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        out.write_record([i.to_string(), l.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
