//! Root position and root-aligned joint errors in the world frame.

use serde::{Deserialize, Serialize};

use crate::body_model::{self, BodyParams, BodyTemplate};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geom::rot;
use crate::sequence_refine::FrameEstimate;
use crate::synthgen::Dataset;

fn check_shapes(estimates: &[Vec<BodyParams>], gt_world: &[BodyParams], extrinsics: &[Vec<CameraPose>]) -> Result<()> {
    if estimates.is_empty() {
        return Err(Error::EmptySequence);
    }
    if gt_world.len() != estimates.len() {
        return Err(Error::shape("ground-truth frames", estimates.len(), gt_world.len()));
    }
    if extrinsics.len() != estimates.len() {
        return Err(Error::shape("extrinsic frames", estimates.len(), extrinsics.len()));
    }
    for (e, x) in estimates.iter().zip(extrinsics) {
        if e.is_empty() || x.len() != e.len() {
            return Err(Error::shape("cameras", e.len().max(1), x.len()));
        }
    }
    Ok(())
}

/// Per-frame root errors, averaged over cameras. Estimates are in their
/// camera's frame and are moved to the world with the true extrinsics.
pub fn per_frame_mpe(estimates: &[Vec<BodyParams>], gt_world: &[BodyParams], extrinsics: &[Vec<CameraPose>]) -> Result<Vec<f64>> {
    check_shapes(estimates, gt_world, extrinsics)?;
    Ok(estimates
        .iter()
        .zip(gt_world)
        .zip(extrinsics)
        .map(|((est, gt), poses)| {
            let sum: f64 = est
                .iter()
                .zip(poses)
                .map(|(e, p)| rot::norm(&rot::sub(&p.camera_to_world(&e.tau), &gt.tau)))
                .sum();
            sum / est.len() as f64
        })
        .collect())
}

fn root_aligned(joints: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let root = joints[0];
    joints.iter().map(|j| rot::sub(j, &root)).collect()
}

/// Per-frame root-aligned joint errors, averaged over joints and cameras.
pub fn per_frame_mpjpe(
    estimates: &[Vec<BodyParams>],
    gt_world: &[BodyParams],
    extrinsics: &[Vec<CameraPose>],
    tpl: &BodyTemplate,
) -> Result<Vec<f64>> {
    check_shapes(estimates, gt_world, extrinsics)?;
    estimates
        .iter()
        .zip(gt_world)
        .zip(extrinsics)
        .map(|((est, gt), poses)| {
            let g = root_aligned(&body_model::joints(gt, tpl)?);
            let mut sum = 0.0;
            for (e, p) in est.iter().zip(poses) {
                let world: Vec<[f64; 3]> = body_model::joints(e, tpl)?
                    .iter()
                    .map(|j| p.camera_to_world(j))
                    .collect();
                let a = root_aligned(&world);
                let err: f64 = a.iter().zip(&g).map(|(x, y)| rot::norm(&rot::sub(x, y))).sum();
                sum += err / a.len() as f64;
            }
            Ok(sum / est.len() as f64)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean root position error over all frames and cameras, meters.
pub fn mpe(estimates: &[Vec<BodyParams>], gt_world: &[BodyParams], extrinsics: &[Vec<CameraPose>]) -> Result<f64> {
    Ok(mean(&per_frame_mpe(estimates, gt_world, extrinsics)?))
}

/// Mean root-aligned joint error over all joints, frames and cameras, meters.
pub fn mpjpe(
    estimates: &[Vec<BodyParams>],
    gt_world: &[BodyParams],
    extrinsics: &[Vec<CameraPose>],
    tpl: &BodyTemplate,
) -> Result<f64> {
    Ok(mean(&per_frame_mpjpe(estimates, gt_world, extrinsics, tpl)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mpe_m: f64,
    pub mpjpe_m: f64,
    pub frame_ids: Vec<u64>,
    pub per_frame_mpe: Vec<f64>,
    pub per_frame_mpjpe: Vec<f64>,
    pub config: serde_json::Value,
    pub seed: u64,
}

/// Scores full-camera-frame estimates against a dataset's ground truth.
pub fn evaluate(
    label: &str,
    estimates: &[FrameEstimate],
    dataset: &Dataset,
    tpl: &BodyTemplate,
    config: serde_json::Value,
    seed: u64,
) -> Result<EvalReport> {
    let mut est = Vec::with_capacity(estimates.len());
    let mut gt = Vec::with_capacity(estimates.len());
    let mut poses = Vec::with_capacity(estimates.len());
    for e in estimates {
        let rec = dataset
            .frame(e.frame_id)
            .ok_or_else(|| Error::Dataset(format!("no ground truth for frame {}", e.frame_id)))?;
        if rec.cameras.len() != e.cameras.len() {
            return Err(Error::shape("cameras", rec.cameras.len(), e.cameras.len()));
        }
        est.push(e.cameras.clone());
        gt.push(rec.ground_truth.clone());
        poses.push(rec.cameras.iter().map(|c| c.pose).collect::<Vec<_>>());
    }
    let per_frame_mpe = per_frame_mpe(&est, &gt, &poses)?;
    let per_frame_mpjpe = per_frame_mpjpe(&est, &gt, &poses, tpl)?;
    Ok(EvalReport {
        label: label.to_string(),
        mpe_m: mean(&per_frame_mpe),
        mpjpe_m: mean(&per_frame_mpjpe),
        frame_ids: estimates.iter().map(|e| e.frame_id).collect(),
        per_frame_mpe,
        per_frame_mpjpe,
        config,
        seed,
    })
}
