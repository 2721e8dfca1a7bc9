//! Shutter-timestamp pairing of the two agents' camera streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::FrameRecord;

/// Half the 40 fps frame period.
pub const DEFAULT_TOLERANCE_MS: f64 = 12.5;

/// One camera frame as seen by one agent. The payload holds only that
/// agent's camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedFrame {
    pub agent_id: usize,
    /// Agent-local clock, nanoseconds.
    pub shutter_timestamp: u64,
    pub payload: FrameRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Index pairs into the two streams, in stream order.
    pub pairs: Vec<(usize, usize)>,
    /// Unmatched indices per stream.
    pub unmatched: [Vec<usize>; 2],
}

fn check_monotone(s: &[TimedFrame], which: usize) -> Result<()> {
    if let Some(w) = s.windows(2).find(|w| w[1].shutter_timestamp < w[0].shutter_timestamp) {
        return Err(Error::Dataset(format!(
            "stream {which} timestamps decrease ({} -> {})",
            w[0].shutter_timestamp, w[1].shutter_timestamp
        )));
    }
    Ok(())
}

/// Greedy nearest-timestamp pairing: candidate pairs within `tolerance_ms`
/// are accepted in order of increasing gap, each frame at most once.
pub fn match_frames(a: &[TimedFrame], b: &[TimedFrame], tolerance_ms: f64) -> Result<MatchResult> {
    if !(tolerance_ms >= 0.0) {
        return Err(Error::Config(format!("tolerance must be nonnegative, got {tolerance_ms}")));
    }
    check_monotone(a, 0)?;
    check_monotone(b, 1)?;
    let tol = (tolerance_ms * 1e6).round() as u64;

    let mut candidates = Vec::new();
    let mut lo = 0;
    for (i, fa) in a.iter().enumerate() {
        let t = fa.shutter_timestamp;
        while lo < b.len() && b[lo].shutter_timestamp + tol < t {
            lo += 1;
        }
        for (j, fb) in b.iter().enumerate().skip(lo) {
            if fb.shutter_timestamp > t + tol {
                break;
            }
            candidates.push((t.abs_diff(fb.shutter_timestamp), i, j));
        }
    }
    candidates.sort_unstable();

    let mut used = [vec![false; a.len()], vec![false; b.len()]];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used[0][i] && !used[1][j] {
            used[0][i] = true;
            used[1][j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    let unmatched = [0, 1].map(|s| (0..used[s].len()).filter(|&k| !used[s][k]).collect());
    Ok(MatchResult { pairs, unmatched })
}
