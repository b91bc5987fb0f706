//! Elastic execution: a single event loop that can hand shard ownership to
//! a worker pool under load and take it back when load drops.
//!
//! Every operation enters one queue. The dispatcher drains it, groups the
//! drained operations by shard (arrival order kept within a shard) and runs
//! each group as one tick. In single mode the dispatcher runs the ticks
//! itself; in multi mode each shard belongs to exactly one worker and its
//! ticks are forwarded to that worker's FIFO. A mode change fences every
//! worker (waits until all forwarded ticks completed) before ownership moves,
//! so no operation is lost, duplicated or reordered within a shard.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::tier_sync::{Reply, Request, TieredStore};

/// A sharded service whose shards can be driven independently.
pub trait ShardService: Send + Sync + 'static {
    type Op: Send + 'static;
    type Reply: Send + 'static;

    fn shard_count(&self) -> usize;
    fn shard_of(&self, op: &Self::Op) -> usize;
    /// Runs one tick on `shard`; one reply per op, in order.
    fn run_tick(&self, shard: usize, ops: Vec<Self::Op>) -> Vec<Self::Reply>;
}

impl ShardService for TieredStore {
    type Op = Request;
    type Reply = Reply;

    fn shard_count(&self) -> usize {
        TieredStore::shard_count(self)
    }

    fn shard_of(&self, op: &Request) -> usize {
        self.shard_for(op.cmd.key())
    }

    fn run_tick(&self, shard: usize, ops: Vec<Request>) -> Vec<Reply> {
        self.apply_tick(shard, ops)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("executor has shut down")]
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    Multi(usize),
}

impl Mode {
    pub fn workers(self) -> usize {
        match self {
            Mode::Single => 0,
            Mode::Multi(n) => n,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Single => f.write_str("single"),
            Mode::Multi(n) => write!(f, "multi({n})"),
        }
    }
}

/// The current mode and when (on the controller's clock) it was entered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecMode {
    pub mode: Mode,
    pub since: Duration,
}

impl ExecMode {
    pub fn single() -> Self {
        Self {
            mode: Mode::Single,
            since: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticConfig {
    pub threads_max: usize,
    pub qps_high_watermark: f64,
    pub qps_low_watermark: f64,
    /// Minimum time in multi mode before returning to single.
    pub cooldown: Duration,
    /// Samples averaged by the controller.
    pub window_len: usize,
    pub sample_period: Duration,
}

impl ElasticConfig {
    /// Watermarks at 0.8× and 0.5× of a measured single-thread MaxPerf.
    pub fn from_calibration(single_max_perf: f64, threads_max: usize) -> Self {
        Self {
            threads_max,
            qps_high_watermark: 0.8 * single_max_perf,
            qps_low_watermark: 0.5 * single_max_perf,
            cooldown: Duration::from_secs(5),
            window_len: 2,
            sample_period: Duration::from_secs(1),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.threads_max < 2 {
            return Err("threads_max must be at least 2".into());
        }
        if !(self.qps_low_watermark < self.qps_high_watermark) {
            return Err("low watermark must be below high watermark".into());
        }
        if self.window_len == 0 {
            return Err("window_len must be positive".into());
        }
        Ok(())
    }
}

/// Ring of per-period operation rates.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadWindow {
    window_len: usize,
    samples: VecDeque<f64>,
    pub high_watermark: f64,
    pub low_watermark: f64,
}

impl LoadWindow {
    pub fn new(window_len: usize, low_watermark: f64, high_watermark: f64) -> Self {
        assert!(window_len > 0, "window_len must be positive");
        assert!(
            low_watermark < high_watermark,
            "low watermark must be below high watermark"
        );
        Self {
            window_len,
            samples: VecDeque::with_capacity(window_len),
            high_watermark,
            low_watermark,
        }
    }

    pub fn push(&mut self, qps: f64) {
        if self.samples.len() == self.window_len {
            self.samples.pop_front();
        }
        self.samples.push_back(qps);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.samples.iter().sum::<f64>() / self.samples.len() as f64
        }
    }
}

/// Next mode given the load window. Scales up above the high watermark,
/// down below the low watermark once the cooldown has passed; holds in
/// between.
pub fn decide_mode(
    current: ExecMode,
    window: &LoadWindow,
    threads_max: usize,
    cooldown: Duration,
    now: Duration,
) -> ExecMode {
    if window.is_empty() {
        return current;
    }
    let qps = window.mean();
    match current.mode {
        Mode::Single if qps > window.high_watermark => ExecMode {
            mode: Mode::Multi(threads_max.max(2)),
            since: now,
        },
        Mode::Multi(_)
            if qps < window.low_watermark && now.saturating_sub(current.since) >= cooldown =>
        {
            ExecMode {
                mode: Mode::Single,
                since: now,
            }
        }
        _ => current,
    }
}

/// Feeds load samples to [`decide_mode`] and remembers the outcome.
#[derive(Debug, Clone)]
pub struct ElasticController {
    config: ElasticConfig,
    window: LoadWindow,
    current: ExecMode,
    transitions: Vec<(Duration, Mode)>,
    scale_out_signals: u64,
}

impl ElasticController {
    pub fn new(config: ElasticConfig) -> Self {
        config.validate().expect("invalid elastic config");
        let window = LoadWindow::new(
            config.window_len,
            config.qps_low_watermark,
            config.qps_high_watermark,
        );
        Self {
            config,
            window,
            current: ExecMode::single(),
            transitions: Vec::new(),
            scale_out_signals: 0,
        }
    }

    /// Records one sample taken at `now`; returns the new mode on a
    /// transition.
    pub fn observe(&mut self, now: Duration, qps: f64) -> Option<Mode> {
        self.window.push(qps);
        let next = decide_mode(
            self.current,
            &self.window,
            self.config.threads_max,
            self.config.cooldown,
            now,
        );
        if matches!(self.current.mode, Mode::Multi(_)) && self.window.mean() > self.config.qps_high_watermark
        {
            // already at full width and still hot
            self.scale_out_signals += 1;
            log::warn!("load {:.0} qps above high watermark in multi mode; scale out", self.window.mean());
        }
        if next.mode != self.current.mode {
            self.current = next;
            self.transitions.push((now, next.mode));
            log::info!("exec mode -> {} at {:?}", next.mode, now);
            Some(next.mode)
        } else {
            None
        }
    }

    pub fn current(&self) -> ExecMode {
        self.current
    }

    pub fn transitions(&self) -> &[(Duration, Mode)] {
        &self.transitions
    }

    pub fn scale_out_signals(&self) -> u64 {
        self.scale_out_signals
    }
}

type ReplyTx<R> = Sender<(usize, R)>;

struct Job<S: ShardService> {
    op: S::Op,
    idx: usize,
    reply: ReplyTx<S::Reply>,
}

enum Msg<S: ShardService> {
    Op(Job<S>),
    SetMode(Mode, Sender<()>),
    Audit(Sender<OwnershipAudit>),
    Shutdown,
}

enum WorkerMsg<S: ShardService> {
    Tick(usize, Vec<Job<S>>),
    Fence(Sender<()>),
}

/// Who owns each shard, as seen by the dispatcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnershipAudit {
    pub mode: Mode,
    /// Shards owned by each worker; empty in single mode.
    pub worker_shards: Vec<Vec<usize>>,
    /// Shards the event loop runs itself.
    pub loop_shards: Vec<usize>,
    pub shard_count: usize,
}

impl OwnershipAudit {
    /// True when every shard has exactly one owner.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![0u32; self.shard_count];
        for s in self.worker_shards.iter().flatten().chain(&self.loop_shards) {
            match seen.get_mut(*s) {
                Some(c) => *c += 1,
                None => return false,
            }
        }
        seen.iter().all(|&c| c == 1)
    }
}

#[derive(Debug, Default)]
struct ExecCounters {
    submitted: AtomicU64,
    completed: AtomicU64,
    ticks: AtomicU64,
    transitions: AtomicU64,
    misrouted: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecStats {
    pub submitted: u64,
    pub completed: u64,
    pub ticks: u64,
    pub transitions: u64,
    /// Ticks that reached a worker not owning the shard. Always 0.
    pub misrouted: u64,
}

struct Worker<S: ShardService> {
    tx: Sender<WorkerMsg<S>>,
    handle: JoinHandle<()>,
}

fn deliver<S: ShardService>(service: &S, shard: usize, jobs: Vec<Job<S>>, counters: &ExecCounters) {
    let mut ops = Vec::with_capacity(jobs.len());
    let mut sinks = Vec::with_capacity(jobs.len());
    for j in jobs {
        ops.push(j.op);
        sinks.push((j.idx, j.reply));
    }
    let n = ops.len() as u64;
    let replies = service.run_tick(shard, ops);
    debug_assert_eq!(replies.len(), sinks.len());
    counters.ticks.fetch_add(1, Ordering::Relaxed);
    counters.completed.fetch_add(n, Ordering::AcqRel);
    for ((idx, tx), r) in sinks.into_iter().zip(replies) {
        // a client that went away just drops its reply
        let _ = tx.send((idx, r));
    }
}

fn worker_loop<S: ShardService>(
    service: Arc<S>,
    owned: Vec<usize>,
    rx: Receiver<WorkerMsg<S>>,
    counters: Arc<ExecCounters>,
) {
    let mut mine = vec![false; service.shard_count()];
    for s in owned {
        mine[s] = true;
    }
    while let Ok(msg) = rx.recv() {
        match msg {
            WorkerMsg::Tick(shard, jobs) => {
                if !mine[shard] {
                    counters.misrouted.fetch_add(1, Ordering::Relaxed);
                }
                deliver(&*service, shard, jobs, &counters);
            }
            WorkerMsg::Fence(ack) => {
                let _ = ack.send(());
            }
        }
    }
}

struct Dispatcher<S: ShardService> {
    service: Arc<S>,
    counters: Arc<ExecCounters>,
    mode: Mode,
    workers: Vec<Worker<S>>,
    owners: Vec<usize>,
    max_tick: usize,
}

impl<S: ShardService> Dispatcher<S> {
    fn run(mut self, rx: Receiver<Msg<S>>) {
        let shards = self.service.shard_count();
        let mut groups: Vec<Vec<Job<S>>> = (0..shards).map(|_| Vec::new()).collect();
        let mut touched: Vec<usize> = Vec::new();
        'outer: while let Ok(first) = rx.recv() {
            let mut next = Some(first);
            let mut drained = 0;
            while let Some(msg) = next.take() {
                match msg {
                    Msg::Op(job) => {
                        let s = self.service.shard_of(&job.op);
                        if groups[s].is_empty() {
                            touched.push(s);
                        }
                        groups[s].push(job);
                        drained += 1;
                    }
                    control => {
                        self.dispatch(&mut groups, &mut touched);
                        match control {
                            Msg::SetMode(m, ack) => {
                                self.transition(m);
                                let _ = ack.send(());
                            }
                            Msg::Audit(tx) => {
                                let _ = tx.send(self.audit());
                            }
                            Msg::Shutdown => break 'outer,
                            Msg::Op(_) => unreachable!(),
                        }
                    }
                }
                if drained < self.max_tick {
                    next = rx.try_recv().ok();
                }
            }
            self.dispatch(&mut groups, &mut touched);
        }
        self.dispatch(&mut groups, &mut touched);
        self.transition(Mode::Single);
    }

    fn dispatch(&mut self, groups: &mut [Vec<Job<S>>], touched: &mut Vec<usize>) {
        for s in touched.drain(..) {
            let jobs = std::mem::take(&mut groups[s]);
            match self.mode {
                Mode::Single => deliver(&*self.service, s, jobs, &self.counters),
                Mode::Multi(_) => {
                    let w = self.owners[s];
                    self.workers[w]
                        .tx
                        .send(WorkerMsg::Tick(s, jobs))
                        .expect("worker alive while owning shards");
                }
            }
        }
    }

    fn transition(&mut self, target: Mode) {
        let target = match target {
            Mode::Multi(n) if n < 2 => Mode::Single,
            other => other,
        };
        if target == self.mode {
            return;
        }
        // fence: every tick already forwarded completes on its owner
        let acks: Vec<_> = self
            .workers
            .iter()
            .map(|w| {
                let (tx, rx) = mpsc::channel();
                w.tx.send(WorkerMsg::Fence(tx)).expect("worker alive");
                rx
            })
            .collect();
        for a in acks {
            let _ = a.recv();
        }
        for w in self.workers.drain(..) {
            drop(w.tx);
            let _ = w.handle.join();
        }
        let shards = self.service.shard_count();
        if let Mode::Multi(n) = target {
            let n = n.min(shards).max(1);
            self.owners = (0..shards).map(|s| s % n).collect();
            for w in 0..n {
                let owned: Vec<usize> = (0..shards).filter(|s| s % n == w).collect();
                let (tx, rx) = mpsc::channel();
                let service = self.service.clone();
                let counters = self.counters.clone();
                let handle = thread::Builder::new()
                    .name(format!("tierkv-worker-{w}"))
                    .spawn(move || worker_loop(service, owned, rx, counters))
                    .expect("spawn worker");
                self.workers.push(Worker { tx, handle });
            }
        } else {
            self.owners.clear();
        }
        self.mode = target;
        self.counters.transitions.fetch_add(1, Ordering::Relaxed);
    }

    fn audit(&self) -> OwnershipAudit {
        let shards = self.service.shard_count();
        let mut worker_shards = vec![Vec::new(); self.workers.len()];
        let mut loop_shards = Vec::new();
        for s in 0..shards {
            match self.mode {
                Mode::Single => loop_shards.push(s),
                Mode::Multi(_) => worker_shards[self.owners[s]].push(s),
            }
        }
        OwnershipAudit {
            mode: self.mode,
            worker_shards,
            loop_shards,
            shard_count: shards,
        }
    }
}

/// Runs a [`ShardService`] behind the dispatcher. Cloning shares the
/// executor; it stops when [`Executor::shutdown`] is called or the last
/// clone is dropped.
pub struct Executor<S: ShardService> {
    inner: Arc<ExecInner<S>>,
}

impl<S: ShardService> Clone for Executor<S> {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.clone(),
        }
    }
}

struct ExecInner<S: ShardService> {
    tx: Sender<Msg<S>>,
    counters: Arc<ExecCounters>,
    service: Arc<S>,
    handle: parking_lot::Mutex<Option<JoinHandle<()>>>,
}

impl<S: ShardService> Drop for ExecInner<S> {
    fn drop(&mut self) {
        let _ = self.tx.send(Msg::Shutdown);
        if let Some(h) = self.handle.lock().take() {
            let _ = h.join();
        }
    }
}

/// Upper bound on operations drained into one tick.
pub const DEFAULT_MAX_TICK: usize = 1024;

impl<S: ShardService> Executor<S> {
    pub fn start(service: Arc<S>, mode: Mode) -> Self {
        let counters = Arc::new(ExecCounters::default());
        let (tx, rx) = mpsc::channel();
        let mut dispatcher = Dispatcher {
            service: service.clone(),
            counters: counters.clone(),
            mode: Mode::Single,
            workers: Vec::new(),
            owners: Vec::new(),
            max_tick: DEFAULT_MAX_TICK,
        };
        dispatcher.transition(mode);
        counters.transitions.store(0, Ordering::Relaxed);
        let handle = thread::Builder::new()
            .name("tierkv-loop".into())
            .spawn(move || dispatcher.run(rx))
            .expect("spawn event loop");
        Self {
            inner: Arc::new(ExecInner {
                tx,
                counters,
                service,
                handle: parking_lot::Mutex::new(Some(handle)),
            }),
        }
    }

    pub fn service(&self) -> &Arc<S> {
        &self.inner.service
    }

    /// Submits `op` and waits for its reply.
    pub fn call(&self, op: S::Op) -> Result<S::Reply, ExecError> {
        self.call_many(vec![op]).map(|mut v| v.pop().unwrap())
    }

    /// Submits all ops back to back (pipelined) and returns replies in
    /// submission order.
    pub fn call_many(&self, ops: Vec<S::Op>) -> Result<Vec<S::Reply>, ExecError> {
        let n = ops.len();
        let (tx, rx) = mpsc::channel();
        for (idx, op) in ops.into_iter().enumerate() {
            self.inner
                .tx
                .send(Msg::Op(Job {
                    op,
                    idx,
                    reply: tx.clone(),
                }))
                .map_err(|_| ExecError::Stopped)?;
            self.inner.counters.submitted.fetch_add(1, Ordering::Relaxed);
        }
        drop(tx);
        let mut out: Vec<Option<S::Reply>> = (0..n).map(|_| None).collect();
        for _ in 0..n {
            let (idx, r) = rx.recv().map_err(|_| ExecError::Stopped)?;
            out[idx] = Some(r);
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    /// Switches mode; returns once ownership has moved. Applying the current
    /// mode again is a no-op.
    pub fn apply_mode(&self, mode: Mode) -> Result<(), ExecError> {
        let (tx, rx) = mpsc::channel();
        self.inner
            .tx
            .send(Msg::SetMode(mode, tx))
            .map_err(|_| ExecError::Stopped)?;
        rx.recv().map_err(|_| ExecError::Stopped)
    }

    pub fn audit(&self) -> Result<OwnershipAudit, ExecError> {
        let (tx, rx) = mpsc::channel();
        self.inner
            .tx
            .send(Msg::Audit(tx))
            .map_err(|_| ExecError::Stopped)?;
        rx.recv().map_err(|_| ExecError::Stopped)
    }

    pub fn mode(&self) -> Result<Mode, ExecError> {
        self.audit().map(|a| a.mode)
    }

    pub fn stats(&self) -> ExecStats {
        let c = &self.inner.counters;
        ExecStats {
            submitted: c.submitted.load(Ordering::Acquire),
            completed: c.completed.load(Ordering::Acquire),
            ticks: c.ticks.load(Ordering::Relaxed),
            transitions: c.transitions.load(Ordering::Relaxed),
            misrouted: c.misrouted.load(Ordering::Relaxed),
        }
    }

    /// Stops the event loop after draining queued work and joining workers.
    pub fn shutdown(&self) {
        let _ = self.inner.tx.send(Msg::Shutdown);
        if let Some(h) = self.inner.handle.lock().take() {
            let _ = h.join();
        }
    }

    /// Runs an [`ElasticController`] on a wall-clock timer fed by the
    /// completed-operation counter.
    pub fn spawn_controller(&self, config: ElasticConfig) -> ControllerHandle {
        let exec = self.clone();
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let stop2 = stop.clone();
        let handle = thread::Builder::new()
            .name("tierkv-elastic".into())
            .spawn(move || {
                let period = config.sample_period;
                let mut ctl = ElasticController::new(config);
                let start = Instant::now();
                let mut last = exec.stats().completed;
                while !stop2.load(Ordering::Acquire) {
                    thread::sleep(period);
                    let done = exec.stats().completed;
                    let qps = (done - last) as f64 / period.as_secs_f64();
                    last = done;
                    if let Some(m) = ctl.observe(start.elapsed(), qps) {
                        if exec.apply_mode(m).is_err() {
                            break;
                        }
                    }
                }
                ctl
            })
            .expect("spawn controller");
        ControllerHandle {
            stop,
            handle: Some(handle),
        }
    }
}

pub struct ControllerHandle {
    stop: Arc<std::sync::atomic::AtomicBool>,
    handle: Option<JoinHandle<ElasticController>>,
}

impl ControllerHandle {
    /// Stops the controller and returns its final state.
    pub fn stop(mut self) -> Option<ElasticController> {
        self.stop.store(true, Ordering::Release);
        self.handle.take().and_then(|h| h.join().ok())
    }
}

impl Drop for ControllerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// A CPU-bound service for throughput comparisons: each op hashes its
/// payload `work` times.
#[derive(Debug)]
pub struct SpinService {
    pub shards: usize,
    pub work: u32,
}

impl ShardService for SpinService {
    type Op = u64;
    type Reply = u64;

    fn shard_count(&self) -> usize {
        self.shards
    }

    fn shard_of(&self, op: &u64) -> usize {
        (*op as usize) % self.shards
    }

    fn run_tick(&self, _shard: usize, ops: Vec<u64>) -> Vec<u64> {
        ops.into_iter()
            .map(|mut x| {
                for _ in 0..self.work {
                    x = crate::hash::fnv1a64(&x.to_le_bytes());
                }
                x
            })
            .collect()
    }
}

/// Ops per second the executor sustains in `mode` with `clients` parallel
/// pipelined clients, each sending `per_client` ops.
pub fn measure_throughput(service: Arc<SpinService>, mode: Mode, clients: usize, per_client: usize) -> f64 {
    let exec = Executor::start(service, mode);
    let started = Instant::now();
    thread::scope(|s| {
        for c in 0..clients {
            let exec = exec.clone();
            s.spawn(move || {
                for chunk in (0..per_client as u64).collect::<Vec<_>>().chunks(256) {
                    let ops = chunk.iter().map(|i| i * clients as u64 + c as u64).collect();
                    exec.call_many(ops).expect("executor running");
                }
            });
        }
    });
    let secs = started.elapsed().as_secs_f64();
    exec.shutdown();
    (clients * per_client) as f64 / secs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tier_sync::{Command, StoreConfig, SyncPolicy};

    fn window(samples: &[f64]) -> LoadWindow {
        let mut w = LoadWindow::new(2, 100_000.0, 120_000.0);
        for s in samples {
            w.push(*s);
        }
        w
    }

    const COOL: Duration = Duration::from_secs(5);

    #[test]
    fn decide_examples() {
        let single = ExecMode::single();
        let t = Duration::from_secs(10);
        assert_eq!(decide_mode(single, &window(&[20e3, 20e3]), 4, COOL, t).mode, Mode::Single);
        assert_eq!(decide_mode(single, &window(&[130e3, 130e3]), 4, COOL, t).mode, Mode::Multi(4));
        let multi = ExecMode {
            mode: Mode::Multi(4),
            since: Duration::ZERO,
        };
        assert_eq!(decide_mode(multi, &window(&[110e3, 110e3]), 4, COOL, t).mode, Mode::Multi(4));
        assert_eq!(decide_mode(multi, &window(&[50e3, 50e3]), 4, COOL, t).mode, Mode::Single);
        // cooldown not yet over
        let recent = ExecMode {
            mode: Mode::Multi(4),
            since: Duration::from_secs(8),
        };
        assert_eq!(decide_mode(recent, &window(&[50e3]), 4, COOL, t), recent);
    }

    #[test]
    #[should_panic]
    fn window_requires_hysteresis_gap() {
        LoadWindow::new(2, 5.0, 5.0);
    }

    fn store() -> Arc<TieredStore> {
        Arc::new(TieredStore::new(
            StoreConfig::new(1 << 20, SyncPolicy::MemoryOnly),
            None,
        ))
    }

    #[test]
    fn executes_in_both_modes() {
        let exec = Executor::start(store(), Mode::Single);
        let set = |k: &str| Request::new(1, Command::Set(k.into(), b"v".to_vec()));
        assert_eq!(exec.call(set("a")).unwrap(), Reply::Ok);
        exec.apply_mode(Mode::Multi(3)).unwrap();
        assert_eq!(
            exec.call(Request::new(1, Command::Get(b"a".to_vec()))).unwrap(),
            Reply::Value(Some(b"v".to_vec()))
        );
        let audit = exec.audit().unwrap();
        assert!(audit.is_partition());
        assert_eq!(audit.worker_shards.len(), 3);
        exec.apply_mode(Mode::Single).unwrap();
        assert!(exec.audit().unwrap().is_partition());
        assert_eq!(exec.stats().transitions, 2);
        exec.apply_mode(Mode::Single).unwrap();
        assert_eq!(exec.stats().transitions, 2);
    }

    #[test]
    fn pipelined_ops_keep_per_key_order() {
        let exec = Executor::start(store(), Mode::Multi(4));
        let ops: Vec<_> = (0..500)
            .map(|i| Request::new(0, Command::Incr(format!("c{}", i % 7).into_bytes(), 1)))
            .collect();
        let replies = exec.call_many(ops).unwrap();
        let mut expect = [0i64; 7];
        for (i, r) in replies.iter().enumerate() {
            expect[i % 7] += 1;
            assert_eq!(*r, Reply::Integer(expect[i % 7]));
        }
    }

    #[test]
    fn transitions_under_load_lose_nothing() {
        let exec = Executor::start(store(), Mode::Single);
        let n_clients = 4u64;
        let per = 400;
        thread::scope(|s| {
            for c in 0..n_clients {
                let exec = exec.clone();
                s.spawn(move || {
                    for i in 0..per {
                        let r = exec
                            .call(Request::new(c, Command::Incr(format!("k{c}").into_bytes(), 1)))
                            .unwrap();
                        assert_eq!(r, Reply::Integer(i + 1));
                    }
                });
            }
            let exec = exec.clone();
            s.spawn(move || {
                for i in 0..20 {
                    let m = if i % 2 == 0 { Mode::Multi(2 + i % 3) } else { Mode::Single };
                    exec.apply_mode(m).unwrap();
                    assert!(exec.audit().unwrap().is_partition());
                    thread::sleep(Duration::from_millis(1));
                }
            });
        });
        let st = exec.stats();
        assert_eq!(st.submitted, n_clients * per as u64);
        assert_eq!(st.completed, st.submitted);
        assert_eq!(st.misrouted, 0);
    }

    #[test]
    fn controller_hysteresis_never_flaps() {
        let mut cfg = ElasticConfig::from_calibration(1000.0, 4);
        cfg.cooldown = Duration::ZERO;
        let mut ctl = ElasticController::new(cfg);
        for t in 0..100 {
            let qps = if t % 2 == 0 { 510.0 } else { 790.0 };
            assert_eq!(ctl.observe(Duration::from_secs(t), qps), None);
        }
    }

    #[test]
    fn spin_service_runs_in_multi_mode() {
        let svc = Arc::new(SpinService { shards: 8, work: 10 });
        let qps = measure_throughput(svc, Mode::Multi(2), 2, 1000);
        assert!(qps > 0.0);
    }
}
