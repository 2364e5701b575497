//! Modeled accelerator compute units.
//!
//! An FC unit really executes the accelerator operator so results are genuine,
//! but the time it reports follows an affine cost model: a fixed per-offload
//! overhead plus `size / throughput`. In wall-clock mode a dedicated service
//! thread runs the operator and then sleeps until the modeled completion time.
//! In virtual-time mode the operator runs inline and completion is an event on
//! a [`VirtualClock`].
//!
//! Completion is observed two ways. The flag can always be polled (spin wait).
//! When the model's `enable` is set, the unit also fires a one-shot
//! notification that a waiter can block on without consuming CPU.

use std::cmp::{Ordering as CmpOrdering, Reverse};
use std::collections::BinaryHeap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::BodyError;
use crate::partitioner::{ChunkDescriptor, ResourceKind};

/// Affine execution-time model: `overhead + size / throughput`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Iterations per second.
    pub throughput: f64,
    /// Fixed seconds per chunk.
    pub overhead: f64,
}

impl CostModel {
    pub fn new(throughput: f64, overhead: f64) -> Self {
        Self {
            throughput,
            overhead,
        }
    }

    pub fn seconds(&self, size: usize) -> f64 {
        self.overhead + size as f64 / self.throughput
    }

    pub fn duration(&self, size: usize) -> Duration {
        Duration::from_secs_f64(self.seconds(size))
    }

    pub fn validate(&self) -> Result<(), AccelError> {
        if !(self.throughput.is_finite() && self.throughput > 0.0) {
            return Err(AccelError::BadThroughput(self.throughput));
        }
        if !(self.overhead.is_finite() && self.overhead >= 0.0) {
            return Err(AccelError::BadOverhead(self.overhead));
        }
        Ok(())
    }
}

/// Homogeneous pool of FC units sharing one cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelModel {
    pub units: usize,
    pub cost: CostModel,
    /// Whether units fire a completion notification.
    pub enable: bool,
}

impl AccelModel {
    pub fn new(units: usize, throughput: f64, overhead: f64) -> Self {
        Self {
            units,
            cost: CostModel::new(throughput, overhead),
            enable: true,
        }
    }

    pub fn validate(&self) -> Result<(), AccelError> {
        if self.units == 0 {
            return Err(AccelError::NoUnits);
        }
        self.cost.validate()
    }
}

/// Seconds one offload of `size` iterations takes on the model.
pub fn modeled_duration(model: &AccelModel, size: usize) -> f64 {
    model.cost.seconds(size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaitDiscipline {
    /// Poll the completion flag continuously.
    Spin,
    /// Block on the completion notification.
    Interrupt,
}

impl WaitDiscipline {
    /// Interrupt waits need notifications, or they would never wake.
    pub fn check(self, model: &AccelModel) -> Result<(), AccelError> {
        if self == WaitDiscipline::Interrupt && !model.enable {
            return Err(AccelError::InterruptDisabled);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccelError {
    #[error("accelerator model needs at least one unit")]
    NoUnits,
    #[error("accelerator throughput must be finite and > 0, got {0}")]
    BadThroughput(f64),
    #[error("accelerator overhead must be finite and >= 0, got {0}")]
    BadOverhead(f64),
    #[error("interrupt wait requires completion notifications to be enabled")]
    InterruptDisabled,
    #[error("FC{0} is busy with another chunk")]
    Busy(usize),
    #[error("cannot offload an empty chunk")]
    EmptyChunk,
    #[error("FC{0} service worker has shut down")]
    Disconnected(usize),
    #[error("virtual offload still pending; advance the clock first")]
    VirtualPending,
    #[error("no pending events while work is outstanding")]
    Deadlock,
}

const PENDING: u8 = 0;
const DONE: u8 = 1;
const FAILED: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionFlag {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Default)]
struct Slot {
    completed_at: Option<Duration>,
    error: Option<BodyError>,
    overran: bool,
    notified: bool,
}

#[derive(Debug)]
struct Completion {
    flag: AtomicU8,
    enable: bool,
    slot: Mutex<Slot>,
    status: Condvar,
    notifications: AtomicUsize,
    transitions: AtomicUsize,
}

impl Completion {
    fn new(enable: bool) -> Self {
        Self {
            flag: AtomicU8::new(PENDING),
            enable,
            slot: Mutex::new(Slot::default()),
            status: Condvar::new(),
            notifications: AtomicUsize::new(0),
            transitions: AtomicUsize::new(0),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Slot> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn finish(&self, at: Duration, result: Result<(), BodyError>, overran: bool) {
        let mut slot = self.lock();
        if self.flag.load(Ordering::Acquire) != PENDING {
            return;
        }
        slot.completed_at = Some(at);
        slot.overran = overran;
        let flag = match result {
            Ok(()) => DONE,
            Err(e) => {
                slot.error = Some(e);
                FAILED
            }
        };
        self.transitions.fetch_add(1, Ordering::Relaxed);
        self.flag.store(flag, Ordering::Release);
        if self.enable {
            slot.notified = true;
            self.notifications.fetch_add(1, Ordering::Relaxed);
            self.status.notify_all();
        }
    }
}

/// Handle to one in-flight offload.
#[derive(Debug, Clone)]
pub struct OffloadHandle {
    pub chunk: ChunkDescriptor,
    /// Time since the clock origin when the chunk was submitted.
    pub submitted_at: Duration,
    pub modeled_duration: Duration,
    is_virtual: bool,
    inner: Arc<Completion>,
}

impl OffloadHandle {
    pub fn flag(&self) -> CompletionFlag {
        match self.inner.flag.load(Ordering::Acquire) {
            PENDING => CompletionFlag::Pending,
            DONE => CompletionFlag::Done,
            _ => CompletionFlag::Failed,
        }
    }

    /// Number of notifications fired so far (0 or 1).
    pub fn notifications(&self) -> usize {
        self.inner.notifications.load(Ordering::Relaxed)
    }

    /// Number of flag transitions so far (0 or 1).
    pub fn transitions(&self) -> usize {
        self.inner.transitions.load(Ordering::Relaxed)
    }
}

/// Outcome of waiting on an offload.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRecord {
    /// Completion minus submission.
    pub duration: Duration,
    /// CPU time the waiting thread burned while waiting.
    pub consumed_compute_time: Duration,
    /// Wall time the waiting thread spent in the wait.
    pub wait_wall_time: Duration,
    pub completed_at: Duration,
    /// Actual compute exceeded the modeled time (wall-clock only).
    pub overran: bool,
    pub result: Result<(), BodyError>,
}

fn thread_cpu_time() -> Option<cpu_time::ThreadTime> {
    cpu_time::ThreadTime::try_now().ok()
}

/// Blocks until the offload leaves `Pending`.
pub fn wait(handle: &OffloadHandle, discipline: WaitDiscipline) -> Result<CompletionRecord, AccelError> {
    if discipline == WaitDiscipline::Interrupt && !handle.inner.enable {
        return Err(AccelError::InterruptDisabled);
    }
    let cpu_start = thread_cpu_time();
    let wall_start = Instant::now();
    if handle.flag() == CompletionFlag::Pending {
        if handle.is_virtual {
            return Err(AccelError::VirtualPending);
        }
        match discipline {
            WaitDiscipline::Spin => {
                while handle.inner.flag.load(Ordering::Acquire) == PENDING {
                    std::hint::spin_loop();
                }
            }
            WaitDiscipline::Interrupt => {
                let mut slot = handle.inner.lock();
                while !slot.notified {
                    slot = handle
                        .inner
                        .status
                        .wait(slot)
                        .unwrap_or_else(|e| e.into_inner());
                }
            }
        }
    }
    let wait_wall_time = wall_start.elapsed();
    let consumed_compute_time = cpu_start.map(|t| t.elapsed()).unwrap_or_default();
    let slot = handle.inner.lock();
    let completed_at = slot.completed_at.unwrap_or(handle.submitted_at);
    let result = match slot.error.clone() {
        Some(e) => Err(e),
        None => Ok(()),
    };
    Ok(CompletionRecord {
        duration: completed_at.saturating_sub(handle.submitted_at),
        consumed_compute_time,
        wait_wall_time,
        completed_at,
        overran: slot.overran,
        result,
    })
}

fn run_guarded<F>(work: F) -> Result<(), BodyError>
where
    F: FnOnce() -> Result<(), BodyError>,
{
    match panic::catch_unwind(AssertUnwindSafe(work)) {
        Ok(r) => r,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "operator panicked".to_string());
            Err(BodyError(msg))
        }
    }
}

type Work<'scope> = Box<dyn FnOnce() -> Result<(), BodyError> + Send + 'scope>;

struct Job<'scope> {
    completion: Arc<Completion>,
    deadline: Instant,
    work: Work<'scope>,
}

/// A wall-clock FC unit backed by a service thread in the given scope.
///
/// The service thread exits once the unit is dropped.
pub struct FcUnit<'scope> {
    id: usize,
    model: AccelModel,
    origin: Instant,
    busy: Arc<AtomicBool>,
    tx: mpsc::Sender<Job<'scope>>,
}

impl<'scope> FcUnit<'scope> {
    pub fn spawn<'env>(
        scope: &'scope thread::Scope<'scope, 'env>,
        id: usize,
        model: AccelModel,
        origin: Instant,
    ) -> Self {
        let (tx, rx) = mpsc::channel::<Job<'scope>>();
        let busy = Arc::new(AtomicBool::new(false));
        let service_busy = Arc::clone(&busy);
        thread::Builder::new()
            .name(format!("fc{id}"))
            .spawn_scoped(scope, move || {
                for job in rx {
                    let started = Instant::now();
                    let result = run_guarded(job.work);
                    let finished = Instant::now();
                    let overran = finished > job.deadline;
                    if !overran {
                        thread::sleep(job.deadline - finished);
                    }
                    let done_at = Instant::now().max(started);
                    service_busy.store(false, Ordering::Release);
                    job.completion
                        .finish(done_at.duration_since(origin), result, overran);
                }
            })
            .expect("failed to spawn FC service thread");
        Self {
            id,
            model,
            origin,
            busy,
            tx,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::Acquire)
    }

    /// Submits `chunk` and returns immediately. `work` runs on the unit's
    /// service thread; completion is reported no earlier than the modeled time.
    pub fn offload<F>(&self, chunk: ChunkDescriptor, work: F) -> Result<OffloadHandle, AccelError>
    where
        F: FnOnce(usize, usize) -> Result<(), BodyError> + Send + 'scope,
    {
        if chunk.is_empty() {
            return Err(AccelError::EmptyChunk);
        }
        if self
            .busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(AccelError::Busy(self.id));
        }
        let submitted = Instant::now();
        let modeled = self.model.cost.duration(chunk.len());
        let completion = Arc::new(Completion::new(self.model.enable));
        let (begin, end) = (chunk.begin, chunk.end);
        let job = Job {
            completion: Arc::clone(&completion),
            deadline: submitted + modeled,
            work: Box::new(move || work(begin, end)),
        };
        if self.tx.send(job).is_err() {
            self.busy.store(false, Ordering::Release);
            return Err(AccelError::Disconnected(self.id));
        }
        Ok(OffloadHandle {
            chunk,
            submitted_at: submitted.duration_since(self.origin),
            modeled_duration: modeled,
            is_virtual: false,
            inner: completion,
        })
    }
}

/// Identity of a scheduled event; also its tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventKey {
    pub at: Duration,
    pub kind: ResourceKind,
    pub resource_id: usize,
    pub seq: u64,
}

struct Pending {
    key: EventKey,
    completion: Option<(Arc<Completion>, Result<(), BodyError>)>,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.key.cmp(&other.key)
    }
}

/// Deterministic discrete-event clock.
///
/// Events fire in `(time, resource kind, resource id, seq)` order; time never
/// moves backwards.
#[derive(Default)]
pub struct VirtualClock {
    now: Duration,
    queue: BinaryHeap<Reverse<Pending>>,
    next_seq: u64,
}

impl std::fmt::Debug for VirtualClock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VirtualClock")
            .field("now", &self.now)
            .field("pending", &self.queue.len())
            .finish()
    }
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Schedules a bare event `after` from now.
    pub fn schedule(&mut self, after: Duration, kind: ResourceKind, resource_id: usize) -> EventKey {
        self.push(after, kind, resource_id, None)
    }

    fn push(
        &mut self,
        after: Duration,
        kind: ResourceKind,
        resource_id: usize,
        completion: Option<(Arc<Completion>, Result<(), BodyError>)>,
    ) -> EventKey {
        let key = EventKey {
            at: self.now + after,
            kind,
            resource_id,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.queue.push(Reverse(Pending { key, completion }));
        key
    }

    /// Pops the earliest event, moves time to it and completes any offload
    /// attached to it. Returns `None` once the queue is empty.
    pub fn advance(&mut self) -> Option<EventKey> {
        let Reverse(ev) = self.queue.pop()?;
        debug_assert!(ev.key.at >= self.now);
        self.now = ev.key.at;
        if let Some((completion, result)) = ev.completion {
            completion.finish(self.now, result, false);
        }
        Some(ev.key)
    }

    /// Like [`advance`](Self::advance), but an empty queue while work is
    /// still outstanding is reported as a deadlock.
    pub fn advance_checked(&mut self, work_outstanding: bool) -> Result<Option<EventKey>, AccelError> {
        match self.advance() {
            None if work_outstanding => Err(AccelError::Deadlock),
            other => Ok(other),
        }
    }

    /// Offloads `chunk` to FC `unit` in virtual time. The operator runs
    /// immediately; the handle completes when the clock reaches
    /// `now + modeled duration`.
    pub fn offload<F>(
        &mut self,
        unit: usize,
        model: &AccelModel,
        chunk: ChunkDescriptor,
        work: F,
    ) -> Result<OffloadHandle, AccelError>
    where
        F: FnOnce(usize, usize) -> Result<(), BodyError>,
    {
        if chunk.is_empty() {
            return Err(AccelError::EmptyChunk);
        }
        let modeled = model.cost.duration(chunk.len());
        let completion = Arc::new(Completion::new(model.enable));
        let result = run_guarded(|| work(chunk.begin, chunk.end));
        let submitted_at = self.now;
        self.push(
            modeled,
            ResourceKind::Fc,
            unit,
            Some((Arc::clone(&completion), result)),
        );
        Ok(OffloadHandle {
            chunk,
            submitted_at,
            modeled_duration: modeled,
            is_virtual: true,
            inner: completion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(begin: usize, end: usize) -> ChunkDescriptor {
        ChunkDescriptor {
            begin,
            end,
            kind: ResourceKind::Fc,
            resource_id: 0,
            seq: 0,
            r_before: end - begin,
            f_at_issue: 1.0,
        }
    }

    #[test]
    fn modeled_duration_examples() {
        let m = AccelModel::new(1, 10_000.0, 0.001);
        assert!((modeled_duration(&m, 128) - 0.0138).abs() < 1e-15);
        assert_eq!(modeled_duration(&m, 0), 0.001);
        let pure = AccelModel::new(1, 10_000.0, 0.0);
        assert_eq!(modeled_duration(&pure, 128), 128.0 / 10_000.0);
    }

    #[test]
    fn model_validation() {
        assert_eq!(AccelModel::new(0, 1.0, 0.0).validate(), Err(AccelError::NoUnits));
        assert!(AccelModel::new(1, 0.0, 0.0).validate().is_err());
        assert!(AccelModel::new(1, 1.0, -1.0).validate().is_err());
        let mut m = AccelModel::new(1, 1.0, 0.0);
        m.enable = false;
        assert_eq!(
            WaitDiscipline::Interrupt.check(&m),
            Err(AccelError::InterruptDisabled)
        );
        assert!(WaitDiscipline::Spin.check(&m).is_ok());
    }

    #[test]
    fn virtual_events_fire_in_time_then_id_order() {
        let mut clock = VirtualClock::new();
        clock.schedule(Duration::from_secs(2), ResourceKind::Fc, 0);
        clock.schedule(Duration::from_secs(1), ResourceKind::Fc, 1);
        clock.schedule(Duration::from_secs(1), ResourceKind::Fc, 0);
        let fired: Vec<_> = std::iter::from_fn(|| clock.advance())
            .map(|k| (k.at.as_secs(), k.resource_id))
            .collect();
        assert_eq!(fired, vec![(1, 0), (1, 1), (2, 0)]);
        assert_eq!(clock.now(), Duration::from_secs(2));
    }

    #[test]
    fn empty_queue_terminates_or_reports_deadlock() {
        let mut clock = VirtualClock::new();
        assert_eq!(clock.advance_checked(false), Ok(None));
        assert_eq!(clock.advance_checked(true), Err(AccelError::Deadlock));
    }

    #[test]
    fn virtual_offload_is_exact_for_both_disciplines() {
        let model = AccelModel::new(1, 1000.0, 0.01);
        for discipline in [WaitDiscipline::Spin, WaitDiscipline::Interrupt] {
            let mut clock = VirtualClock::new();
            let h = clock.offload(0, &model, chunk(0, 100), |_, _| Ok(())).unwrap();
            assert_eq!(h.flag(), CompletionFlag::Pending);
            assert_eq!(wait(&h, discipline), Err(AccelError::VirtualPending));
            clock.advance().unwrap();
            let rec = wait(&h, discipline).unwrap();
            assert_eq!(rec.duration, model.cost.duration(100));
            assert_eq!(rec.result, Ok(()));
            assert_eq!(h.notifications(), 1);
            assert_eq!(h.transitions(), 1);
        }
    }

    #[test]
    fn virtual_offload_failure_sets_failed() {
        let model = AccelModel::new(1, 1000.0, 0.0);
        let mut clock = VirtualClock::new();
        let h = clock
            .offload(0, &model, chunk(0, 4), |_, _| Err(BodyError::new("boom")))
            .unwrap();
        clock.advance();
        assert_eq!(h.flag(), CompletionFlag::Failed);
        assert_eq!(wait(&h, WaitDiscipline::Spin).unwrap().result, Err(BodyError::new("boom")));
    }

    #[test]
    fn wall_offload_with_notifications() {
        let model = AccelModel::new(1, 1e6, 0.005);
        thread::scope(|s| {
            let unit = FcUnit::spawn(s, 0, model, Instant::now());
            let h = unit.offload(chunk(0, 10), |_, _| Ok(())).unwrap();
            assert!(matches!(unit.offload(chunk(10, 20), |_, _| Ok(())), Err(AccelError::Busy(0))));
            let rec = wait(&h, WaitDiscipline::Interrupt).unwrap();
            assert_eq!(h.flag(), CompletionFlag::Done);
            assert_eq!(h.notifications(), 1);
            assert!(rec.duration >= h.modeled_duration);
            assert!(!unit.is_busy());
        });
    }

    #[test]
    fn wall_offload_without_notifications_still_spins() {
        let mut model = AccelModel::new(1, 1e6, 0.002);
        model.enable = false;
        thread::scope(|s| {
            let unit = FcUnit::spawn(s, 0, model, Instant::now());
            let h = unit.offload(chunk(0, 10), |_, _| Ok(())).unwrap();
            assert_eq!(wait(&h, WaitDiscipline::Interrupt), Err(AccelError::InterruptDisabled));
            let rec = wait(&h, WaitDiscipline::Spin).unwrap();
            assert_eq!(rec.result, Ok(()));
            assert_eq!(h.flag(), CompletionFlag::Done);
            assert_eq!(h.notifications(), 0);
        });
    }

    #[test]
    fn wall_offload_failure_and_panic() {
        let model = AccelModel::new(1, 1e9, 0.0);
        thread::scope(|s| {
            let unit = FcUnit::spawn(s, 3, model, Instant::now());
            let h = unit.offload(chunk(0, 1), |_, _| Err(BodyError::new("bad"))).unwrap();
            let rec = wait(&h, WaitDiscipline::Interrupt).unwrap();
            assert_eq!(h.flag(), CompletionFlag::Failed);
            assert_eq!(rec.result, Err(BodyError::new("bad")));

            let h = unit.offload(chunk(0, 1), |_, _| panic!("kaboom")).unwrap();
            let rec = wait(&h, WaitDiscipline::Interrupt).unwrap();
            assert_eq!(rec.result, Err(BodyError::new("kaboom")));
        });
    }

    #[test]
    fn offload_results_match_inline_execution() {
        let model = AccelModel::new(1, 1e9, 0.0);
        let out: Vec<AtomicUsize> = (0..16).map(|_| AtomicUsize::new(0)).collect();
        let square = |b: usize, e: usize| {
            for (i, slot) in out.iter().enumerate().take(e).skip(b) {
                slot.store(i * i, Ordering::Relaxed);
            }
            Ok(())
        };
        thread::scope(|s| {
            let unit = FcUnit::spawn(s, 0, model, Instant::now());
            let h = unit.offload(chunk(0, 16), square).unwrap();
            wait(&h, WaitDiscipline::Spin).unwrap();
        });
        let got: Vec<_> = out.iter().map(|a| a.load(Ordering::Relaxed)).collect();
        let want: Vec<_> = (0..16).map(|i| i * i).collect();
        assert_eq!(got, want);
    }
}
