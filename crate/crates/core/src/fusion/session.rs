//! Whole-sequence runs of the two agents on a virtual clock.
//!
//! Every matched frame pair gets one processing window. Inside a window an
//! event loop drives the two [`Agent`] state machines; messages travel as
//! encoded bytes. A frame pair is dropped for both agents when either one
//! finishes after the window closes.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::body_model::{BodyParams, BodyTemplate};
use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::estimator::{state_to_full, Agent, AgentOutput, EstimatorConfig, EstimatorMode, FrameInput, RefinerKind};
use crate::fusion::codec::{self, StageMessage, BODY_FLOATS, BODY_LEN, MESSAGE_LEN};
use crate::fusion::matching::{self, MatchResult, TimedFrame, DEFAULT_TOLERANCE_MS};
use crate::fusion::timing::{window_timeline, AgentDurations, ComponentTrace, Schedule, TimingModel, WindowTimeline};
use crate::pose_prior::PriorBasis;
use crate::sequence_refine::FrameEstimate;
use crate::synthgen::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub estimator: EstimatorConfig,
    pub timing: TimingModel,
    /// Consume the partner's previous-frame messages instead of waiting.
    pub pipelined: bool,
    pub tolerance_ms: f64,
    /// Seeds jitter and clock offsets.
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            estimator: EstimatorConfig::default(),
            timing: TimingModel::calibrated(),
            pipelined: false,
            tolerance_ms: DEFAULT_TOLERANCE_MS,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.timing.validate()?;
        if !(self.tolerance_ms >= 0.0) {
            return Err(Error::Config(format!("tolerance_ms must be nonnegative, got {}", self.tolerance_ms)));
        }
        Ok(())
    }
}

/// Per-agent frame storage that counts who reads whose frames.
#[derive(Debug)]
pub struct ObservationStore {
    slots: [Vec<TimedFrame>; 2],
    reads: [[AtomicU64; 2]; 2],
}

impl ObservationStore {
    pub fn new(slots: [Vec<TimedFrame>; 2]) -> Self {
        ObservationStore {
            slots,
            reads: Default::default(),
        }
    }

    /// Frame `index` of `owner`'s stream, read by agent `reader`.
    pub fn read(&self, reader: usize, owner: usize, index: usize) -> Result<&TimedFrame> {
        self.reads[reader][owner].fetch_add(1, AtomicOrdering::Relaxed);
        self.slots[owner]
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("agent {owner} has no frame {index}")))
    }

    /// Shutter timestamps only, for frame matching.
    pub fn timestamps(&self) -> [Vec<u64>; 2] {
        [0, 1].map(|a| self.slots[a].iter().map(|f| f.shutter_timestamp).collect())
    }

    pub fn streams(&self) -> &[Vec<TimedFrame>; 2] {
        &self.slots
    }

    /// `reads[reader][owner]`.
    pub fn reads(&self) -> [[u64; 2]; 2] {
        [0, 1].map(|r| [0, 1].map(|o| self.reads[r][o].load(AtomicOrdering::Relaxed)))
    }
}

/// Splits a two-camera dataset into one single-camera stream per agent,
/// stamped with the agent's clock.
pub fn agent_streams(d: &Dataset, timing: &TimingModel, seed: u64) -> Result<[Vec<TimedFrame>; 2]> {
    d.validate()?;
    if d.num_cameras() != 2 {
        return Err(Error::shape("cameras", 2, d.num_cameras()));
    }
    let offsets = timing.clock_offsets_ns(seed);
    Ok([0, 1].map(|a| {
        d.frames
            .iter()
            .map(|rec| {
                let mut payload = rec.clone();
                payload.cameras = vec![rec.cameras[a].clone()];
                TimedFrame {
                    agent_id: a,
                    shutter_timestamp: rec.shutter_timestamp.saturating_add_signed(offsets[a]),
                    payload,
                }
            })
            .collect()
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub window: usize,
    pub frame_ids: [u64; 2],
    pub schedule: Schedule,
    pub completed: bool,
    pub total_ms: f64,
    pub messages: [u32; 2],
    pub floats: [u32; 2],
    pub body_bytes: [u32; 2],
    pub components: Vec<ComponentTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub mode: EstimatorMode,
    pub refiner: RefinerKind,
    pub pipelined: bool,
    pub seed: u64,
    pub timing: TimingModel,
    pub matched: usize,
    pub completed: usize,
    pub dropped: usize,
    pub unmatched: [usize; 2],
    pub drop_rate: f64,
    /// Completed frames per second of virtual time.
    pub effective_fps: f64,
    pub window_fps: f64,
    pub messages_sent: [u64; 2],
    /// Wire bytes, header included.
    pub bytes_sent: [u64; 2],
    pub frames: Vec<FrameTrace>,
}

impl SessionReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// One row per window.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "window",
            "frame_id_0",
            "frame_id_1",
            "schedule",
            "completed",
            "total_ms",
            "messages_0",
            "messages_1",
            "body_bytes_0",
            "body_bytes_1",
        ])?;
        for f in &self.frames {
            out.write_record([
                f.window.to_string(),
                f.frame_ids[0].to_string(),
                f.frame_ids[1].to_string(),
                format!("{:?}", f.schedule).to_lowercase(),
                f.completed.to_string(),
                format!("{:.6}", f.total_ms),
                f.messages[0].to_string(),
                f.messages[1].to_string(),
                f.body_bytes[0].to_string(),
                f.body_bytes[1].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionOutput {
    pub report: SessionReport,
    /// Completed frames, full camera frame, camera order = agent order.
    pub estimates: Vec<FrameEstimate>,
    /// `reads[reader][owner]` of the observation store.
    pub reads: [[u64; 2]; 2],
}

/// What one window produced.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowOutcome {
    pub completed: bool,
    pub finish_ms: [Option<f64>; 2],
    /// Estimator-state results of agents that finished in time.
    pub estimates: [Option<BodyParams>; 2],
    /// Encoded messages each agent sent within the window, with send times.
    pub sent: [Vec<(f64, Vec<u8>)>; 2],
    /// Messages each agent received within the window.
    pub received: [Vec<StageMessage>; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

enum Event {
    Acquired(usize),
    StageDone { agent: usize, stage: usize, sent: Vec<StageMessage>, done: Option<BodyParams> },
    Arrival { to: usize, bytes: Vec<u8> },
}

struct Queue {
    heap: BinaryHeap<std::cmp::Reverse<(Time, u64)>>,
    events: Vec<Option<Event>>,
}

impl Queue {
    fn push(&mut self, t: f64, e: Event) {
        self.heap.push(std::cmp::Reverse((Time(t), self.events.len() as u64)));
        self.events.push(Some(e));
    }

    fn pop(&mut self) -> Option<(f64, Event)> {
        let std::cmp::Reverse((t, id)) = self.heap.pop()?;
        Some((t.0, self.events[id as usize].take().expect("event popped once")))
    }
}

/// Splits an all-stages agent output into per-stage completions.
fn stage_events(out: AgentOutput, from_stage: usize, blocking: bool) -> Vec<(usize, Vec<StageMessage>, Option<BodyParams>)> {
    if blocking {
        return vec![(from_stage, out.sent, out.done)];
    }
    let mut sent = out.sent.into_iter();
    let mut evs: Vec<_> = (0..crate::estimator::NUM_STAGES - 1)
        .map(|s| (s, sent.next().into_iter().collect(), None))
        .collect();
    evs.push((crate::estimator::NUM_STAGES - 1, Vec::new(), out.done));
    evs
}

/// Runs one matched pair through acquisition, three stages and two
/// exchanges on the virtual clock. Events after `window_ms` never happen.
#[allow(clippy::too_many_arguments)]
pub fn simulate_frame_window(
    tpl: &BodyTemplate,
    prior: &PriorBasis,
    agents: &mut [Agent; 2],
    frames: [FrameInput; 2],
    durations: &[AgentDurations; 2],
    schedule: Schedule,
    stale: Option<&[[StageMessage; 2]; 2]>,
    window_ms: f64,
) -> Result<WindowOutcome> {
    if schedule == Schedule::Pipelined && stale.is_none() {
        return Err(Error::Config("pipelined window needs the previous frame's messages".into()));
    }
    let blocking = schedule == Schedule::Blocking;
    let mut q = Queue {
        heap: BinaryHeap::new(),
        events: Vec::new(),
    };
    for (a, d) in durations.iter().enumerate() {
        q.push(d.acquisition_ms, Event::Acquired(a));
    }
    let mut frames = frames.map(Some);
    let mut waiting = [false; 2];
    let mut inbox: [VecDeque<StageMessage>; 2] = Default::default();
    let mut out = WindowOutcome {
        completed: false,
        finish_ms: [None; 2],
        estimates: [None, None],
        sent: Default::default(),
        received: Default::default(),
    };

    while let Some((t, ev)) = q.pop() {
        if t > window_ms {
            break;
        }
        let mut resume = None;
        match ev {
            Event::Acquired(a) => {
                let frame = frames[a].take().expect("one acquisition per agent");
                let stale_a = stale.filter(|_| schedule == Schedule::Pipelined).map(|s| &s[a]);
                let result = agents[a].start_frame(tpl, prior, frame, stale_a)?;
                let mut end = t;
                for (stage, sent, done) in stage_events(result, 0, blocking) {
                    end += durations[a].stage_ms[stage];
                    q.push(end, Event::StageDone { agent: a, stage, sent, done });
                }
            }
            Event::StageDone { agent, stage, sent, done } => {
                for m in sent {
                    let bytes = codec::encode_message(&m)?;
                    out.sent[agent].push((t, bytes.clone()));
                    q.push(t + durations[agent].comm_ms[stage], Event::Arrival { to: 1 - agent, bytes });
                }
                if let Some(p) = done {
                    out.finish_ms[agent] = Some(t);
                    out.estimates[agent] = Some(p);
                } else if blocking {
                    waiting[agent] = true;
                    resume = Some(agent);
                }
            }
            Event::Arrival { to, bytes } => {
                let msg = codec::decode_message(&bytes)?;
                out.received[to].push(msg.clone());
                if blocking {
                    inbox[to].push_back(msg);
                    resume = Some(to);
                }
            }
        }
        if let Some(a) = resume {
            if waiting[a] {
                if let Some(msg) = inbox[a].pop_front() {
                    waiting[a] = false;
                    let next = msg.stage as usize + 1;
                    let result = agents[a].receive(tpl, prior, &msg)?;
                    for (stage, sent, done) in stage_events(result, next, true) {
                        q.push(t + durations[a].stage_ms[stage], Event::StageDone { agent: a, stage, sent, done });
                    }
                }
            }
        }
    }
    out.completed = out.finish_ms.iter().all(|f| f.is_some_and(|t| t <= window_ms));
    for a in agents.iter_mut() {
        a.abort();
    }
    Ok(out)
}

fn schedule_for(mode: EstimatorMode, pipelined: bool, have_stale: bool) -> Schedule {
    if !mode.exchanges() {
        Schedule::Independent
    } else if pipelined && have_stale {
        Schedule::Pipelined
    } else {
        Schedule::Blocking
    }
}

/// Whether a completed window refreshes the previous-frame message cache:
/// every message must have arrived before the window closed.
fn refreshes_cache(t: &WindowTimeline, window_ms: f64) -> bool {
    t.completed && t.sends.len() == 4 && t.sends.iter().all(|s| s.arrive_ms <= window_ms)
}

/// The per-window plan shared by both drivers; depends only on timing.
struct WindowPlan {
    pair: (usize, usize),
    durations: [AgentDurations; 2],
    schedule: Schedule,
    timeline: WindowTimeline,
    refresh: bool,
}

fn plan_windows(cfg: &SessionConfig, matches: &MatchResult) -> Vec<WindowPlan> {
    let mut have_stale = false;
    matches
        .pairs
        .iter()
        .enumerate()
        .map(|(w, &pair)| {
            let durations = cfg.timing.window_durations(cfg.seed, w as u64);
            let schedule = schedule_for(cfg.estimator.mode, cfg.pipelined, have_stale);
            let timeline = window_timeline(&durations, schedule, cfg.timing.window_ms);
            let refresh = cfg.pipelined && schedule != Schedule::Independent && refreshes_cache(&timeline, cfg.timing.window_ms);
            have_stale |= refresh;
            WindowPlan {
                pair,
                durations,
                schedule,
                timeline,
                refresh,
            }
        })
        .collect()
}

fn match_store(store: &ObservationStore, tolerance_ms: f64) -> Result<MatchResult> {
    // Matching sees timestamps only.
    let ts = store.timestamps();
    let strip = |a: usize| -> Vec<TimedFrame> {
        ts[a]
            .iter()
            .zip(&store.streams()[a])
            .map(|(&t, f)| TimedFrame {
                agent_id: a,
                shutter_timestamp: t,
                payload: crate::synthgen::FrameRecord {
                    cameras: Vec::new(),
                    ..f.payload.clone()
                },
            })
            .collect()
    };
    matching::match_frames(&strip(0), &strip(1), tolerance_ms)
}

fn frame_input(store: &ObservationStore, agent: usize, index: usize, cfg: &EstimatorConfig) -> Result<FrameInput> {
    let tf = store.read(agent, agent, index)?;
    FrameInput::from_record(&tf.payload, 0, cfg.refiner == RefinerKind::Oracle)
}

fn to_full(p: &BodyParams, f: &FrameInput) -> Result<BodyParams> {
    state_to_full(p, &f.crop, &f.intrinsics)
}

struct WindowRecord {
    completed: bool,
    estimate: Option<FrameEstimate>,
    sent: [Vec<usize>; 2],
}

fn assemble(
    cfg: &SessionConfig,
    matches: &MatchResult,
    store: &ObservationStore,
    plans: &[WindowPlan],
    records: Vec<WindowRecord>,
) -> Result<SessionOutput> {
    let mut frames = Vec::with_capacity(plans.len());
    let mut estimates = Vec::new();
    let mut messages_sent = [0u64; 2];
    let mut bytes_sent = [0u64; 2];
    for (w, (plan, rec)) in plans.iter().zip(records).enumerate() {
        let ids = [
            store.streams()[0][plan.pair.0].payload.frame_id,
            store.streams()[1][plan.pair.1].payload.frame_id,
        ];
        for a in 0..2 {
            messages_sent[a] += rec.sent[a].len() as u64;
            bytes_sent[a] += rec.sent[a].iter().map(|&n| n as u64).sum::<u64>();
        }
        frames.push(FrameTrace {
            window: w,
            frame_ids: ids,
            schedule: plan.schedule,
            completed: rec.completed,
            total_ms: plan.timeline.total_ms,
            messages: [0, 1].map(|a| rec.sent[a].len() as u32),
            floats: [0, 1].map(|a| (rec.sent[a].len() * BODY_FLOATS) as u32),
            body_bytes: [0, 1].map(|a| rec.sent[a].iter().map(|&n| (n - (MESSAGE_LEN - BODY_LEN)) as u32).sum()),
            components: plan.timeline.components.clone(),
        });
        estimates.extend(rec.estimate);
    }
    let matched = plans.len();
    let completed = frames.iter().filter(|f| f.completed).count();
    let seconds = matched as f64 * cfg.timing.window_ms / 1000.0;
    Ok(SessionOutput {
        report: SessionReport {
            mode: cfg.estimator.mode,
            refiner: cfg.estimator.refiner,
            pipelined: cfg.pipelined,
            seed: cfg.seed,
            timing: cfg.timing,
            matched,
            completed,
            dropped: matched - completed,
            unmatched: [matches.unmatched[0].len(), matches.unmatched[1].len()],
            drop_rate: if matched > 0 { (matched - completed) as f64 / matched as f64 } else { 0.0 },
            effective_fps: if matched > 0 { completed as f64 / seconds } else { 0.0 },
            window_fps: cfg.timing.window_fps(),
            messages_sent,
            bytes_sent,
            frames,
        },
        estimates,
        reads: store.reads(),
    })
}

/// Single-threaded event-loop session over a two-camera dataset.
pub fn run_session(d: &Dataset, model: &ModelBundle, cfg: &SessionConfig) -> Result<SessionOutput> {
    cfg.validate()?;
    let store = ObservationStore::new(agent_streams(d, &cfg.timing, cfg.seed)?);
    let matches = match_store(&store, cfg.tolerance_ms)?;
    let plans = plan_windows(cfg, &matches);
    let (tpl, prior) = (&model.template, &model.prior);
    let mut agents = [Agent::new(0, cfg.estimator), Agent::new(1, cfg.estimator)];
    let mut stale: Option<[[StageMessage; 2]; 2]> = None;
    let mut records = Vec::with_capacity(plans.len());

    for plan in &plans {
        let inputs = [
            frame_input(&store, 0, plan.pair.0, &cfg.estimator)?,
            frame_input(&store, 1, plan.pair.1, &cfg.estimator)?,
        ];
        let outcome = simulate_frame_window(
            tpl,
            prior,
            &mut agents,
            inputs.clone(),
            &plan.durations,
            plan.schedule,
            stale.as_ref(),
            cfg.timing.window_ms,
        )?;
        debug_assert_eq!(outcome.completed, plan.timeline.completed);
        if plan.refresh {
            let cache = [0, 1].map(|a| {
                let mut r = outcome.received[a].clone();
                r.sort_by_key(|m| m.stage);
                [r[0].clone(), r[1].clone()]
            });
            stale = Some(cache);
        }
        let estimate = if outcome.completed {
            let cams = [0, 1]
                .map(|a| to_full(outcome.estimates[a].as_ref().expect("completed"), &inputs[a]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            Some(FrameEstimate {
                frame_id: inputs[0].frame_id,
                cameras: cams,
            })
        } else {
            None
        };
        records.push(WindowRecord {
            completed: outcome.completed,
            estimate,
            sent: outcome.sent.map(|v| v.iter().map(|(_, b)| b.len()).collect()),
        });
    }
    assemble(cfg, &matches, &store, &plans, records)
}

/// Per-window result of one agent thread.
struct ThreadWindow {
    estimate: Option<BodyParams>,
    input: FrameInput,
    sent: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn agent_thread(
    id: usize,
    model: &ModelBundle,
    cfg: &SessionConfig,
    store: &ObservationStore,
    plans: &[WindowPlan],
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
) -> Result<Vec<ThreadWindow>> {
    let (tpl, prior) = (&model.template, &model.prior);
    let mut agent = Agent::new(id, cfg.estimator);
    let mut stale: Option<[StageMessage; 2]> = None;
    let mut out = Vec::with_capacity(plans.len());
    let recv = |rx: &mpsc::Receiver<Vec<u8>>| -> Result<StageMessage> {
        let bytes = rx.recv().map_err(|_| Error::ExchangeTimeout { stage: 0 })?;
        codec::decode_message(&bytes)
    };
    for plan in plans {
        let index = if id == 0 { plan.pair.0 } else { plan.pair.1 };
        let input = frame_input(store, id, index, &cfg.estimator)?;
        let window_ms = cfg.timing.window_ms;
        if !plan.timeline.completed {
            // Nothing of a dropped window survives except what was on the wire.
            let n = plan.timeline.sends_within(id, window_ms);
            out.push(ThreadWindow {
                estimate: None,
                input,
                sent: vec![MESSAGE_LEN; n],
            });
            continue;
        }
        let mut sent = Vec::new();
        let mut send = |m: &StageMessage| -> Result<()> {
            let bytes = codec::encode_message(m)?;
            sent.push(bytes.len());
            tx.send(bytes).map_err(|_| Error::ExchangeTimeout { stage: m.stage })
        };
        let estimate = match plan.schedule {
            Schedule::Independent => agent.start_frame(tpl, prior, input.clone(), None)?.done,
            Schedule::Blocking => {
                let mut got = Vec::new();
                let mut step = agent.start_frame(tpl, prior, input.clone(), None)?;
                let done = loop {
                    for m in &step.sent {
                        send(m)?;
                    }
                    if step.done.is_some() {
                        break step.done;
                    }
                    let msg = recv(&rx)?;
                    step = agent.receive(tpl, prior, &msg)?;
                    got.push(msg);
                };
                if plan.refresh {
                    let pair = <[StageMessage; 2]>::try_from(got).map_err(|_| Error::ExchangeTimeout { stage: 1 })?;
                    stale = Some(pair);
                }
                done
            }
            Schedule::Pipelined => {
                let step = agent.start_frame(tpl, prior, input.clone(), stale.as_ref())?;
                for m in &step.sent {
                    send(m)?;
                }
                let got = [recv(&rx)?, recv(&rx)?];
                if plan.refresh {
                    stale = Some(got);
                }
                step.done
            }
        };
        out.push(ThreadWindow { estimate, input, sent });
    }
    Ok(out)
}

/// Same session with each agent on its own thread, exchanging encoded
/// messages over channels. Window timing comes from the shared plan, so the
/// output equals [`run_session`] for the same configuration.
pub fn run_session_threaded(d: &Dataset, model: &ModelBundle, cfg: &SessionConfig) -> Result<SessionOutput> {
    cfg.validate()?;
    let store = ObservationStore::new(agent_streams(d, &cfg.timing, cfg.seed)?);
    let matches = match_store(&store, cfg.tolerance_ms)?;
    let plans = plan_windows(cfg, &matches);
    let (tx01, rx01) = mpsc::channel();
    let (tx10, rx10) = mpsc::channel();
    let (r0, r1) = std::thread::scope(|s| {
        let h0 = s.spawn(|| agent_thread(0, model, cfg, &store, &plans, tx01, rx10));
        let h1 = s.spawn(|| agent_thread(1, model, cfg, &store, &plans, tx10, rx01));
        (h0.join(), h1.join())
    });
    let join = |r: std::thread::Result<Result<Vec<ThreadWindow>>>| {
        r.map_err(|_| Error::Config("agent thread panicked".into()))?
    };
    let (w0, w1) = (join(r0)?, join(r1)?);
    let mut records = Vec::with_capacity(plans.len());
    for ((plan, a), b) in plans.iter().zip(w0).zip(w1) {
        let estimate = match (&a.estimate, &b.estimate) {
            (Some(ea), Some(eb)) if plan.timeline.completed => Some(FrameEstimate {
                frame_id: a.input.frame_id,
                cameras: vec![to_full(ea, &a.input)?, to_full(eb, &b.input)?],
            }),
            _ => None,
        };
        records.push(WindowRecord {
            completed: plan.timeline.completed,
            estimate,
            sent: [a.sent, b.sent],
        });
    }
    assemble(cfg, &matches, &store, &plans, records)
}

pub fn write_estimates_jsonl<W: Write>(out: &SessionOutput, w: W) -> Result<()> {
    crate::sequence_refine::write_frame_estimates_jsonl(&out.estimates, w)
}
