//! Wire format of the per-stage exchange.
//!
//! Header (12 bytes): `frame_id` u64 LE, `stage` u8, three zero bytes.
//! Body (544 bytes): 126 θ values then 10 β values, f32 LE.

use serde::{Deserialize, Serialize};

use crate::body_model::{BETA_DIM, THETA_DIM};
use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 12;
pub const BODY_FLOATS: usize = THETA_DIM + BETA_DIM;
pub const BODY_LEN: usize = 4 * BODY_FLOATS;
pub const MESSAGE_LEN: usize = HEADER_LEN + BODY_LEN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMessage {
    pub frame_id: u64,
    pub stage: u8,
    pub theta: Vec<f32>,
    pub beta: Vec<f32>,
}

impl StageMessage {
    pub fn from_f64(frame_id: u64, stage: u8, theta: &[f64], beta: &[f64]) -> Self {
        StageMessage {
            frame_id,
            stage,
            theta: theta.iter().map(|&v| v as f32).collect(),
            beta: beta.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn zero(frame_id: u64, stage: u8) -> Self {
        StageMessage {
            frame_id,
            stage,
            theta: vec![0.0; THETA_DIM],
            beta: vec![0.0; BETA_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage > 1 {
            return Err(Error::MalformedMessage(format!("stage {} out of range", self.stage)));
        }
        if self.theta.len() != THETA_DIM {
            return Err(Error::shape("message theta", THETA_DIM, self.theta.len()));
        }
        if self.beta.len() != BETA_DIM {
            return Err(Error::shape("message beta", BETA_DIM, self.beta.len()));
        }
        if self.theta.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return Err(Error::MalformedMessage("non-finite payload".into()));
        }
        Ok(())
    }

    pub fn float_count(&self) -> usize {
        self.theta.len() + self.beta.len()
    }

    pub fn theta_f64(&self) -> Vec<f64> {
        self.theta.iter().map(|&v| v as f64).collect()
    }

    pub fn beta_f64(&self) -> Vec<f64> {
        self.beta.iter().map(|&v| v as f64).collect()
    }
}

pub fn encode_message(m: &StageMessage) -> Result<Vec<u8>> {
    m.validate()?;
    let mut out = Vec::with_capacity(MESSAGE_LEN);
    out.extend_from_slice(&m.frame_id.to_le_bytes());
    out.push(m.stage);
    out.extend_from_slice(&[0; 3]);
    for v in m.theta.iter().chain(&m.beta) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(out.len(), MESSAGE_LEN);
    Ok(out)
}

pub fn decode_message(bytes: &[u8]) -> Result<StageMessage> {
    if bytes.len() != MESSAGE_LEN {
        return Err(Error::MalformedMessage(format!(
            "expected {MESSAGE_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let frame_id = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
    let stage = bytes[8];
    if bytes[9..12] != [0, 0, 0] {
        return Err(Error::MalformedMessage("reserved header bytes must be zero".into()));
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let m = StageMessage {
        frame_id,
        stage,
        theta: floats[..THETA_DIM].to_vec(),
        beta: floats[THETA_DIM..].to_vec(),
    };
    m.validate()?;
    Ok(m)
}

/// The 544-byte payload of an encoded message.
pub fn body(bytes: &[u8]) -> &[u8] {
    &bytes[HEADER_LEN..]
}
