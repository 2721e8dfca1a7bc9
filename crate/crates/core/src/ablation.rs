//! Four-mode ablation over one dataset.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorConfig, EstimatorMode, FrameInput, RefinerKind};
use crate::metrics::{self, EvalReport};
use crate::sequence_refine::FrameEstimate;
use crate::synthgen::Dataset;

/// Hex SHA-256 of the dataset's JSON-lines encoding.
pub fn dataset_sha256(d: &Dataset) -> Result<String> {
    let mut bytes = Vec::new();
    d.write_jsonl(&mut bytes)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs both agents on every frame without timing constraints; estimates
/// are returned in the full camera frame of each camera.
pub fn estimate_dataset(d: &Dataset, cfg: &EstimatorConfig, model: &ModelBundle) -> Result<Vec<FrameEstimate>> {
    d.validate()?;
    if d.num_cameras() != 2 {
        return Err(Error::shape("cameras", 2, d.num_cameras()));
    }
    let oracle = cfg.refiner == RefinerKind::Oracle;
    d.frames
        .iter()
        .map(|rec| {
            let frames = [
                FrameInput::from_record(rec, 0, oracle)?,
                FrameInput::from_record(rec, 1, oracle)?,
            ];
            let out = estimator::run_pair(&model.template, &model.prior, frames, cfg)?;
            let cameras = out
                .iter()
                .zip(&rec.cameras)
                .map(|(o, cam)| estimator::state_to_full(&o.params, &cam.crop, &cam.intrinsics))
                .collect::<Result<Vec<_>>>()?;
            Ok(FrameEstimate {
                frame_id: rec.frame_id,
                cameras,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub input_sha256: String,
    pub reports: Vec<EvalReport>,
}

impl AblationReport {
    pub fn report(&self, mode: EstimatorMode) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.label == mode.name())
    }

    /// Rows of `mode, mpe_m, mpjpe_m`.
    pub fn table(&self) -> String {
        let mut s = String::from("mode,mpe_m,mpjpe_m\n");
        for r in &self.reports {
            s.push_str(&format!("{},{:.6},{:.6}\n", r.label, r.mpe_m, r.mpjpe_m));
        }
        s
    }
}

/// Evaluates all four modes on identical inputs, in parallel. The dataset
/// hash is recomputed inside every mode's run and must match.
pub fn run_ablation(d: &Dataset, base: &EstimatorConfig, model: &ModelBundle) -> Result<AblationReport> {
    let reference = dataset_sha256(d)?;
    let results: Vec<Result<EvalReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = EstimatorMode::ALL
            .iter()
            .map(|&mode| {
                let reference = &reference;
                s.spawn(move || -> Result<EvalReport> {
                    if &dataset_sha256(d)? != reference {
                        return Err(Error::Dataset("ablation inputs differ between modes".into()));
                    }
                    let cfg = EstimatorConfig { mode, ..*base };
                    let est = estimate_dataset(d, &cfg, model)?;
                    let config = serde_json::to_value(cfg)?;
                    metrics::evaluate(mode.name(), &est, d, &model.template, config, cfg.seed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    Ok(AblationReport {
        input_sha256: reference,
        reports: results.into_iter().collect::<Result<_>>()?,
    })
}
