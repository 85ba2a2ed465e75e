//! The trial loop behind a live session.
//!
//! One thread owns the learner. Clients reach it only through the bounded
//! [`InboundQueue`]; it answers through a broadcast channel of encoded
//! messages, a watch channel mirroring [`SessionState`], and per-request
//! reply channels.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use cotrain_core::harness::{
    build_emg_source, build_feedback_source, EmgSourceConfig, ExperimentConfig, FeedbackConfig, FeedbackSource,
    NoFeedback, Observation, StepRecord, Trial, INTERACTIVE_STEP,
};
use cotrain_core::reward::{FeedbackEvent, FeedbackOrigin};
use cotrain_core::signals::{EmgSource, LatestSample, LiveEmg};
use cotrain_core::Error;
use tokio::sync::{broadcast, mpsc, watch};
use uuid::Uuid;

use crate::protocol::{
    encode, AppliedFeedback, ControlAction, ControlMsg, ErrorCode, ErrorMsg, Phase, SessionState, TelemetryFrame,
    WireMessage,
};

pub const DEFAULT_QUEUE_CAPACITY: usize = 64;
pub const DEFAULT_CLIENT_BUFFER: usize = 256;

#[derive(Clone, Debug)]
pub struct BridgeConfig {
    /// Config used by `start` requests that do not carry one.
    pub experiment: ExperimentConfig,
    pub step_period: Duration,
    /// Emit a telemetry frame every `decimation` steps.
    pub decimation: u64,
    pub queue_capacity: usize,
    /// Frames buffered per client before it counts as stalled.
    pub client_buffer: usize,
    /// Directory for per-session JSON-lines traces.
    pub log_dir: Option<PathBuf>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            experiment: ExperimentConfig { feedback: FeedbackConfig::Live, ..Default::default() },
            step_period: INTERACTIVE_STEP,
            decimation: 1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            client_buffer: DEFAULT_CLIENT_BUFFER,
            log_dir: None,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> cotrain_core::Result<()> {
        self.experiment.validate()?;
        if self.step_period.is_zero() {
            return Err(Error::Config("step period must be positive".into()));
        }
        if self.decimation == 0 || self.queue_capacity == 0 || self.client_buffer == 0 {
            return Err(Error::Config("decimation, queue capacity and client buffer must be >= 1".into()));
        }
        Ok(())
    }
}

pub type Reply = mpsc::Sender<WireMessage>;

#[derive(Debug)]
pub enum Command {
    Control(Box<ControlMsg>),
    Feedback { value: f64, received: Instant },
    Emg(f64),
}

#[derive(Debug)]
pub struct Inbound {
    pub cmd: Command,
    pub reply: Option<Reply>,
}

fn send_reply(reply: &Option<Reply>, err: ErrorMsg) {
    if let Some(tx) = reply {
        if tx.try_send(WireMessage::Error(err)).is_err() {
            log::debug!("reply dropped: client gone or backed up");
        }
    }
}

struct QueueState {
    items: VecDeque<Inbound>,
    closed: bool,
}

/// Bounded multi-producer queue into the trial loop. When full, the oldest
/// entry is dropped.
pub struct InboundQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
    capacity: usize,
}

impl InboundQueue {
    pub fn new(capacity: usize) -> Self {
        InboundQueue {
            state: Mutex::new(QueueState { items: VecDeque::with_capacity(capacity), closed: false }),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Enqueues an item, returning the entry evicted to make room, if any.
    pub fn push(&self, item: Inbound) -> Option<Inbound> {
        let mut st = self.lock();
        let evicted = if st.items.len() >= self.capacity { st.items.pop_front() } else { None };
        st.items.push_back(item);
        drop(st);
        self.ready.notify_one();
        if let Some(old) = &evicted {
            log::warn!("inbound queue full ({}); dropped oldest {:?}", self.capacity, old.cmd);
            send_reply(&old.reply, ErrorMsg::new(ErrorCode::QueueOverflow, "dropped: inbound queue full"));
        }
        evicted
    }

    /// Takes everything queued, waiting until an item arrives, `deadline`
    /// passes, or the queue is closed. Returns `None` once closed.
    pub fn wait(&self, deadline: Option<Instant>) -> Option<Vec<Inbound>> {
        let mut st = self.lock();
        loop {
            if st.closed {
                return None;
            }
            if !st.items.is_empty() {
                return Some(st.items.drain(..).collect());
            }
            match deadline {
                None => st = self.ready.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Some(Vec::new());
                    }
                    st = self.ready.wait_timeout(st, d - now).unwrap_or_else(|p| p.into_inner()).0;
                }
            }
        }
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn len(&self) -> usize {
        self.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scripted feedback from the config plus presses delivered by clients.
struct Merged<'a> {
    base: &'a mut dyn FeedbackSource,
    live: &'a mut Vec<f64>,
}

impl FeedbackSource for Merged<'_> {
    fn poll(&mut self, obs: &Observation) -> Vec<FeedbackEvent> {
        let mut events = self.base.poll(obs);
        events.extend(self.live.drain(..).map(|value| FeedbackEvent {
            step: obs.step,
            value,
            source: FeedbackOrigin::Human,
        }));
        events
    }
}

struct Active {
    trial: Trial,
    max_steps: u64,
    emg: Box<dyn EmgSource>,
    live_emg: Option<LatestSample>,
    scripted: Box<dyn FeedbackSource>,
    pending: Vec<f64>,
    unsent: Vec<AppliedFeedback>,
    log: Option<BufWriter<File>>,
}

impl Active {
    fn write(&mut self, rec: &StepRecord) -> std::io::Result<()> {
        if let Some(w) = self.log.as_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

pub(crate) struct Channels {
    pub queue: Arc<InboundQueue>,
    pub frames: broadcast::Sender<Arc<str>>,
    pub state: watch::Sender<SessionState>,
    pub clients: Arc<AtomicUsize>,
}

pub(crate) fn initial_state(cfg: &BridgeConfig) -> SessionState {
    SessionState {
        session_id: Uuid::new_v4(),
        phase: Phase::Idle,
        config: cfg.experiment.clone(),
        seed: cfg.experiment.seeds.first().copied().unwrap_or(0),
        step: 0,
        clients: 0,
        log_path: None,
        fault: None,
    }
}

pub(crate) struct SessionLoop {
    cfg: BridgeConfig,
    ch: Channels,
    active: Option<Active>,
}

impl SessionLoop {
    pub fn new(cfg: BridgeConfig, ch: Channels) -> Self {
        SessionLoop { cfg, ch, active: None }
    }

    fn phase(&self) -> Phase {
        self.ch.state.borrow().phase
    }

    fn publish(&self, msg: &WireMessage) {
        // Err only means nobody is subscribed.
        let _ = self.ch.frames.send(Arc::from(encode(msg)));
    }

    fn set_phase(&mut self, phase: Phase, fault: Option<String>) {
        let clients = self.ch.clients.load(Ordering::Relaxed);
        self.ch.state.send_modify(|s| {
            s.phase = phase;
            s.fault = fault;
            s.clients = clients;
        });
        log::info!("session {} -> {:?}", self.ch.state.borrow().session_id, phase);
        let snapshot = self.ch.state.borrow().clone();
        self.publish(&WireMessage::State(snapshot));
    }

    pub fn run(mut self) {
        let mut next_tick = Instant::now();
        loop {
            let deadline = (self.phase() == Phase::Running).then_some(next_tick);
            let Some(batch) = self.ch.queue.wait(deadline) else { break };
            let was_running = self.phase() == Phase::Running;
            for item in batch {
                self.handle(item);
            }
            let now = Instant::now();
            if self.phase() != Phase::Running {
                continue;
            }
            if !was_running {
                next_tick = now;
            }
            if now >= next_tick {
                self.step();
                next_tick += self.cfg.step_period;
                if next_tick < now {
                    next_tick = now + self.cfg.step_period;
                }
            }
        }
        self.finish(Phase::Finished, None);
    }

    fn handle(&mut self, item: Inbound) {
        let Inbound { cmd, reply } = item;
        match cmd {
            Command::Control(c) => {
                if let Err(e) = self.control(*c) {
                    send_reply(&reply, e);
                }
            }
            Command::Feedback { value, received } => {
                let phase = self.phase();
                match self.active.as_mut() {
                    Some(a) if phase == Phase::Running => {
                        if a.trial.mode().uses_human() {
                            log::debug!("press {value} queued for {:?}", received.elapsed());
                            a.pending.push(value);
                        } else {
                            send_reply(
                                &reply,
                                ErrorMsg::new(
                                    ErrorCode::IgnoredByMode,
                                    format!("{} training ignores human feedback", a.trial.mode()),
                                ),
                            );
                        }
                    }
                    _ => send_reply(&reply, ErrorMsg::new(ErrorCode::NotRunning, "not running")),
                }
            }
            Command::Emg(s_raw) => match self.active.as_ref().and_then(|a| a.live_emg.as_ref()) {
                Some(slot) => slot.push(s_raw),
                None => send_reply(&reply, ErrorMsg::new(ErrorCode::EmgNotLive, "no live EMG source in this session")),
            },
        }
    }

    fn control(&mut self, c: ControlMsg) -> Result<(), ErrorMsg> {
        let phase = self.phase();
        let invalid =
            || ErrorMsg::new(ErrorCode::InvalidTransition, format!("cannot {:?} while {:?}", c.action, phase));
        match c.action {
            ControlAction::Start if phase.can_start() => self.start(c.config, c.seed),
            ControlAction::Pause if phase == Phase::Running => {
                self.set_phase(Phase::Paused, None);
                Ok(())
            }
            ControlAction::Resume if phase == Phase::Paused => {
                self.set_phase(Phase::Running, None);
                Ok(())
            }
            ControlAction::Stop if matches!(phase, Phase::Running | Phase::Paused) => {
                self.finish(Phase::Finished, None);
                Ok(())
            }
            _ => Err(invalid()),
        }
    }

    fn start(&mut self, config: Option<ExperimentConfig>, seed: Option<u64>) -> Result<(), ErrorMsg> {
        let mut cfg = config.unwrap_or_else(|| self.cfg.experiment.clone());
        // Traces go where the server is configured to write them.
        cfg.output_dir = self.cfg.log_dir.clone();
        let seed = seed.or(cfg.seeds.first().copied()).unwrap_or(0);
        let bad = |e: Error| ErrorMsg::new(ErrorCode::InvalidConfig, e.to_string());

        let trial = Trial::new(&cfg, seed).map_err(bad)?;
        let (emg, live_emg): (Box<dyn EmgSource>, _) = match &cfg.emg {
            EmgSourceConfig::Live { calibration_max } => {
                let slot = LatestSample::new();
                (Box::new(LiveEmg::new(slot.clone(), *calibration_max).map_err(bad)?), Some(slot))
            }
            _ => (build_emg_source(&cfg, seed).map_err(bad)?, None),
        };
        let scripted: Box<dyn FeedbackSource> = match &cfg.feedback {
            FeedbackConfig::Live => Box::new(NoFeedback),
            _ => build_feedback_source(&cfg, seed).map_err(bad)?,
        };

        let first = self.phase() == Phase::Idle;
        let session_id = if first { self.ch.state.borrow().session_id } else { Uuid::new_v4() };
        let (log, log_path) = match &cfg.output_dir {
            Some(dir) => {
                let path = dir.join(format!("session_{session_id}.jsonl"));
                let file = fs::create_dir_all(dir).and_then(|_| File::create(&path)).map_err(|e| {
                    ErrorMsg::new(ErrorCode::InvalidConfig, format!("cannot open {}: {e}", path.display()))
                })?;
                (Some(BufWriter::new(file)), Some(path))
            }
            None => (None, None),
        };

        self.active = Some(Active {
            trial,
            max_steps: cfg.max_steps,
            emg,
            live_emg,
            scripted,
            pending: Vec::new(),
            unsent: Vec::new(),
            log,
        });
        self.ch.state.send_modify(|s| {
            s.session_id = session_id;
            s.config = cfg;
            s.seed = seed;
            s.step = 0;
            s.log_path = log_path;
        });
        self.set_phase(Phase::Running, None);
        Ok(())
    }

    fn step(&mut self) {
        let Some(a) = self.active.as_mut() else { return };
        let mut fb = Merged { base: a.scripted.as_mut(), live: &mut a.pending };
        let outcome = a.trial.step(a.emg.as_mut(), &mut fb);
        let rec = match outcome {
            Ok(rec) => rec,
            Err(Error::SourceExhausted { step }) => {
                log::info!("EMG source exhausted at step {step}");
                return self.finish(Phase::Finished, None);
            }
            Err(e) => {
                log::warn!("trial stopped: {e}");
                return self.finish(Phase::Faulted, Some(e.to_string()));
            }
        };
        if let Err(e) = a.write(&rec) {
            log::warn!("trace write failed, logging disabled: {e}");
            a.log = None;
        }
        a.unsent.extend(rec.feedback.iter().map(|&value| AppliedFeedback { step: rec.t, value }));
        let done = rec.t + 1 >= a.max_steps;
        if rec.t % self.cfg.decimation == 0 || done {
            let frame = TelemetryFrame::from_record(&rec, std::mem::take(&mut a.unsent));
            self.publish(&WireMessage::Telemetry(frame));
        }
        self.ch.state.send_modify(|s| s.step = rec.t + 1);
        if done {
            self.finish(Phase::Finished, None);
        }
    }

    fn finish(&mut self, phase: Phase, fault: Option<String>) {
        let Some(mut a) = self.active.take() else { return };
        if let Some(w) = a.log.as_mut() {
            if let Err(e) = w.flush() {
                log::warn!("trace flush failed: {e}");
            }
        }
        self.set_phase(phase, fault);
    }
}
