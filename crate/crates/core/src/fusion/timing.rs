//! Component timing, seeded jitter and the per-window schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::NUM_STAGES;

/// Jitter scale giving a 28% drop rate in the same-frame exchange schedule,
/// from [`calibrate_jitter`] over 20000 windows of seed 0.
pub const CALIBRATED_JITTER_SCALE: f64 = 0.005_283;

/// Drop rate the calibrated jitter reproduces.
pub const TARGET_DROP_RATE: f64 = 0.28;

/// Per-component delays: exponential with mean `scale` times the nominal
/// duration, independent across components and agents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterModel {
    pub scale: f64,
}

impl Default for JitterModel {
    fn default() -> Self {
        JitterModel { scale: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingModel {
    pub acquisition_ms: f64,
    pub stage1_ms: f64,
    pub later_stage_ms: f64,
    /// One-way latency of one message.
    pub comm_ms: f64,
    pub window_ms: f64,
    pub camera_fps: f64,
    pub jitter: JitterModel,
    /// Clock offsets are uniform in ±this, per agent.
    pub clock_offset_ms: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            acquisition_ms: 140.0,
            stage1_ms: 43.0,
            later_stage_ms: 2.5,
            comm_ms: 25.0,
            window_ms: 240.0,
            camera_fps: 40.0,
            jitter: JitterModel::default(),
            clock_offset_ms: 1.0,
        }
    }
}

impl TimingModel {
    /// Default timing with the calibrated jitter.
    pub fn calibrated() -> Self {
        TimingModel {
            jitter: JitterModel { scale: CALIBRATED_JITTER_SCALE },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("acquisition_ms", self.acquisition_ms),
            ("stage1_ms", self.stage1_ms),
            ("later_stage_ms", self.later_stage_ms),
            ("comm_ms", self.comm_ms),
            ("jitter.scale", self.jitter.scale),
            ("clock_offset_ms", self.clock_offset_ms),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.window_ms > 0.0) || !(self.camera_fps > 0.0) {
            return Err(Error::Config("window_ms and camera_fps must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_ms(&self, stage: usize) -> f64 {
        if stage == 0 {
            self.stage1_ms
        } else {
            self.later_stage_ms
        }
    }

    /// Same-frame exchange schedule without jitter.
    pub fn nominal_total_ms(&self) -> f64 {
        self.acquisition_ms + self.stage1_ms + 2.0 * (self.comm_ms + self.later_stage_ms)
    }

    /// One frame per window.
    pub fn window_fps(&self) -> f64 {
        1000.0 / self.window_ms
    }

    /// Component durations of one agent in one window.
    pub fn sample(&self, rng: &mut impl Rng) -> AgentDurations {
        let mut d = |nominal: f64| {
            let e: f64 = Exp1.sample(rng);
            nominal + self.jitter.scale * nominal * e
        };
        AgentDurations {
            acquisition_ms: d(self.acquisition_ms),
            stage_ms: [d(self.stage_ms(0)), d(self.stage_ms(1)), d(self.stage_ms(2))],
            comm_ms: [d(self.comm_ms), d(self.comm_ms)],
        }
    }

    /// Durations of both agents in window `window`, a pure function of the
    /// seed and window index.
    pub fn window_durations(&self, seed: u64, window: u64) -> [AgentDurations; 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, window));
        [self.sample(&mut rng), self.sample(&mut rng)]
    }

    /// Agent clock offsets in nanoseconds.
    pub fn clock_offsets_ns(&self, seed: u64) -> [i64; 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
        let r = self.clock_offset_ms;
        [0, 1].map(|_| {
            let ms = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
            (ms * 1e6).round() as i64
        })
    }
}

fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDurations {
    pub acquisition_ms: f64,
    pub stage_ms: [f64; NUM_STAGES],
    /// Latency of the message sent after stage 0 and stage 1.
    pub comm_ms: [f64; 2],
}

/// How an agent gets partner information within a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// No exchange at all.
    Independent,
    /// Wait for the partner's same-frame message before stages 2 and 3.
    Blocking,
    /// Use the partner's previous-frame messages; sends do not block.
    Pipelined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentTrace {
    pub agent: usize,
    pub component: String,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// A message leaving an agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SendEvent {
    pub from: usize,
    pub stage: usize,
    pub send_ms: f64,
    pub arrive_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowTimeline {
    /// Time each agent finishes its last stage.
    pub finish_ms: [f64; 2],
    pub total_ms: f64,
    pub completed: bool,
    pub sends: Vec<SendEvent>,
    pub components: Vec<ComponentTrace>,
}

impl WindowTimeline {
    /// Messages sent by `agent` before the window closed.
    pub fn sends_within(&self, agent: usize, window_ms: f64) -> usize {
        self.sends.iter().filter(|s| s.from == agent && s.send_ms <= window_ms).count()
    }
}

/// Schedule of one window: a stage starts when the agent's previous stage
/// ended and, when blocking, the partner's message has arrived.
pub fn window_timeline(d: &[AgentDurations; 2], schedule: Schedule, window_ms: f64) -> WindowTimeline {
    let mut components = Vec::new();
    let mut sends = Vec::new();
    let mut end = [0.0; 2];
    for (a, da) in d.iter().enumerate() {
        end[a] = da.acquisition_ms;
        components.push(ComponentTrace {
            agent: a,
            component: "acquisition".into(),
            start_ms: 0.0,
            end_ms: end[a],
        });
    }
    for stage in 0..NUM_STAGES {
        let mut start = end;
        if stage > 0 && schedule == Schedule::Blocking {
            for a in 0..2 {
                let b = 1 - a;
                let arrival = end[b] + d[b].comm_ms[stage - 1];
                start[a] = start[a].max(arrival);
            }
        }
        for a in 0..2 {
            if stage > 0 && schedule != Schedule::Independent {
                let b = 1 - a;
                components.push(ComponentTrace {
                    agent: b,
                    component: format!("comm{stage}"),
                    start_ms: end[b],
                    end_ms: end[b] + d[b].comm_ms[stage - 1],
                });
            }
        }
        for a in 0..2 {
            let stop = start[a] + d[a].stage_ms[stage];
            components.push(ComponentTrace {
                agent: a,
                component: format!("stage{}", stage + 1),
                start_ms: start[a],
                end_ms: stop,
            });
            if stage + 1 < NUM_STAGES && schedule != Schedule::Independent {
                sends.push(SendEvent {
                    from: a,
                    stage,
                    send_ms: stop,
                    arrive_ms: stop + d[a].comm_ms[stage],
                });
            }
        }
        for a in 0..2 {
            end[a] = start[a] + d[a].stage_ms[stage];
        }
    }
    let total_ms = end[0].max(end[1]);
    WindowTimeline {
        finish_ms: end,
        total_ms,
        completed: total_ms <= window_ms,
        sends,
        components,
    }
}

/// Fraction of `windows` dropped by the blocking schedule.
pub fn drop_rate(model: &TimingModel, schedule: Schedule, windows: u64, seed: u64) -> f64 {
    let dropped = (0..windows)
        .filter(|&w| !window_timeline(&model.window_durations(seed, w), schedule, model.window_ms).completed)
        .count();
    dropped as f64 / windows.max(1) as f64
}

/// Jitter scale whose blocking-schedule drop rate over `windows` windows is
/// closest to `target`. The same random draws are reused for every trial
/// scale, so the drop rate is monotone in the scale.
pub fn calibrate_jitter(base: &TimingModel, target: f64, windows: u64, seed: u64) -> Result<f64> {
    base.validate()?;
    if !(0.0..1.0).contains(&target) || windows == 0 {
        return Err(Error::Config(format!("cannot calibrate to drop rate {target} over {windows} windows")));
    }
    let rate = |scale: f64| {
        let m = TimingModel {
            jitter: JitterModel { scale },
            ..*base
        };
        drop_rate(&m, Schedule::Blocking, windows, seed)
    };
    if rate(0.0) > target {
        return Err(Error::Config("nominal schedule already exceeds the target drop rate".into()));
    }
    let mut hi = 1e-4;
    while rate(hi) < target {
        hi *= 2.0;
        if hi > 10.0 {
            return Err(Error::Config("target drop rate unreachable".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
