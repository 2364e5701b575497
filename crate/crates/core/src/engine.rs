//! `parallel_for` over CPU and accelerator tokens.
//!
//! Each token repeatedly claims a chunk from the shared [`Partitioner`] and
//! executes it on its resource until the iteration space runs out. Claiming is
//! the only serialized step; execution is fully parallel.
//!
//! Two drivers share the same token logic:
//!
//! * wall-clock: one scoped thread per token. CPU tokens run the CPU operator
//!   inline; accelerator tokens offload to their own [`FcUnit`] and wait with
//!   the configured discipline.
//! * virtual time: a single-threaded discrete-event loop. Operators still run
//!   for real, but durations come from cost models, so the chunk sequence is a
//!   pure function of the configuration.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::accel::{self, AccelError, AccelModel, CostModel, FcUnit, OffloadHandle, VirtualClock, WaitDiscipline};
use crate::body::{BodyError, LoopBody};
use crate::partitioner::{
    ChunkDescriptor, ConfigError, Partitioner, ResourceKind, SchedulerConfig, TimingError,
};
use crate::trace::TraceRecord;

/// Smallest duration fed back to the partitioner; keeps zero-cost chunks legal.
const MIN_TICK: Duration = Duration::from_nanos(1);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClockMode {
    WallClock,
    /// Durations follow `cpu` for CPU chunks and the accelerator model for FC chunks.
    VirtualTime { cpu: CostModel },
}

/// Everything about a run that is not the partitioning itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecConfig {
    pub clock: ClockMode,
    pub accel: AccelModel,
    pub wait: WaitDiscipline,
}

impl ExecConfig {
    pub fn virtual_time(cpu: CostModel, accel: AccelModel) -> Self {
        Self {
            clock: ClockMode::VirtualTime { cpu },
            accel,
            wait: WaitDiscipline::Interrupt,
        }
    }

    pub fn wall_clock(accel: AccelModel, wait: WaitDiscipline) -> Self {
        Self {
            clock: ClockMode::WallClock,
            accel,
            wait,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token {
    pub kind: ResourceKind,
    pub id: usize,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind, self.id)
    }
}

/// `n_cores` CPU tokens followed by `n_accel` accelerator tokens.
pub fn make_tokens(cfg: &SchedulerConfig) -> Vec<Token> {
    let cc = (0..cfg.n_cores).map(|id| Token {
        kind: ResourceKind::Cc,
        id,
    });
    let fc = (0..cfg.n_accel).map(|id| Token {
        kind: ResourceKind::Fc,
        id,
    });
    cc.chain(fc).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub wall_time: Duration,
    /// Busy time per token, in token order.
    pub per_resource_busy: Vec<(Token, Duration)>,
    /// Executed chunks in issue order.
    pub trace: Vec<TraceRecord>,
    pub iterations_done: usize,
    pub final_f: f64,
    pub warnings: Vec<String>,
}

impl RunReport {
    fn assemble(
        tokens: &[Token],
        mut trace: Vec<TraceRecord>,
        wall_time: Duration,
        final_f: f64,
        warnings: Vec<String>,
    ) -> Self {
        trace.sort_by_key(|r| r.seq);
        let mut busy: HashMap<Token, Duration> = HashMap::new();
        for r in &trace {
            *busy
                .entry(Token {
                    kind: r.kind,
                    id: r.resource_id,
                })
                .or_default() += r.duration();
        }
        Self {
            wall_time,
            per_resource_busy: tokens
                .iter()
                .map(|t| (*t, busy.get(t).copied().unwrap_or_default()))
                .collect(),
            iterations_done: trace.iter().map(|r| r.size()).sum(),
            trace,
            final_f,
            warnings,
        }
    }

    pub fn busy(&self, token: Token) -> Duration {
        self.per_resource_busy
            .iter()
            .find(|(t, _)| *t == token)
            .map(|(_, d)| *d)
            .unwrap_or_default()
    }
}

/// An operator failure, with everything that completed before the run drained.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub token: Token,
    pub begin: usize,
    pub end: usize,
    pub error: BodyError,
    pub partial: RunReport,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid scheduler config: {0}")]
    Config(#[from] ConfigError),
    #[error("accelerator error: {0}")]
    Accel(#[from] AccelError),
    #[error("{requested} accelerator tokens requested but the model has {units} units")]
    NotEnoughUnits { requested: usize, units: usize },
    #[error("invalid range: end {end} < begin {begin}")]
    BadRange { begin: usize, end: usize },
    #[error("chunk timing rejected: {0}")]
    Timing(#[from] TimingError),
    #[error("{} failed on [{}, {}): {}", .0.token, .0.begin, .0.end, .0.error)]
    OperatorFailed(Box<RunFailure>),
}

/// Runs `body` over `[begin, end)` on `cfg.n_cores` CPU tokens and
/// `cfg.n_accel` accelerator tokens. `cfg.n` is taken from the range.
pub fn parallel_for<B: LoopBody>(
    begin: usize,
    end: usize,
    body: &B,
    cfg: &SchedulerConfig,
    exec: &ExecConfig,
) -> Result<RunReport, EngineError> {
    if end < begin {
        return Err(EngineError::BadRange { begin, end });
    }
    let cfg = SchedulerConfig {
        n: end - begin,
        ..cfg.clone()
    };
    cfg.validate()?;
    if cfg.n_accel > 0 {
        exec.accel.validate()?;
        exec.wait.check(&exec.accel)?;
        if cfg.n_accel > exec.accel.units {
            return Err(EngineError::NotEnoughUnits {
                requested: cfg.n_accel,
                units: exec.accel.units,
            });
        }
    }
    if let ClockMode::VirtualTime { cpu } = exec.clock {
        if cfg.n_cores > 0 {
            cpu.validate()?;
        }
    }
    let tokens = make_tokens(&cfg);
    let part = Partitioner::new(begin, cfg)?;
    match exec.clock {
        ClockMode::VirtualTime { cpu } => run_virtual(&part, &tokens, body, cpu, exec),
        ClockMode::WallClock => run_wall(&part, &tokens, body, exec),
    }
}

struct Failure {
    token: Token,
    chunk: ChunkDescriptor,
    error: BodyError,
}

fn finish(
    part: &Partitioner,
    tokens: &[Token],
    trace: Vec<TraceRecord>,
    wall_time: Duration,
    warnings: Vec<String>,
    failure: Option<Failure>,
) -> Result<RunReport, EngineError> {
    let report = RunReport::assemble(tokens, trace, wall_time, part.speed_factor(), warnings);
    match failure {
        None => Ok(report),
        Some(f) => Err(EngineError::OperatorFailed(Box::new(RunFailure {
            token: f.token,
            begin: f.chunk.begin,
            end: f.chunk.end,
            error: f.error,
            partial: report,
        }))),
    }
}

fn record_for(chunk: &ChunkDescriptor, t_start: Duration, t_end: Duration) -> TraceRecord {
    TraceRecord {
        seq: chunk.seq,
        kind: chunk.kind,
        resource_id: chunk.resource_id,
        begin: chunk.begin,
        end: chunk.end,
        t_start,
        t_end,
        f_after: chunk.f_at_issue,
        r_before: chunk.r_before,
    }
}

struct InFlight {
    chunk: ChunkDescriptor,
    start: Duration,
    handle: Option<OffloadHandle>,
    result: Result<(), BodyError>,
}

fn run_virtual<B: LoopBody>(
    part: &Partitioner,
    tokens: &[Token],
    body: &B,
    cpu: CostModel,
    exec: &ExecConfig,
) -> Result<RunReport, EngineError> {
    let mut clock = VirtualClock::new();
    let mut in_flight: HashMap<(ResourceKind, usize), InFlight> = HashMap::new();
    let mut trace = Vec::new();
    let mut failure: Option<Failure> = None;

    let start = |clock: &mut VirtualClock, chunk: ChunkDescriptor| -> Result<InFlight, EngineError> {
        let now = clock.now();
        match chunk.kind {
            ResourceKind::Cc => {
                let result = body.cpu_operator(chunk.begin, chunk.end);
                clock.schedule(cpu.duration(chunk.len()).max(MIN_TICK), chunk.kind, chunk.resource_id);
                Ok(InFlight {
                    chunk,
                    start: now,
                    handle: None,
                    result,
                })
            }
            ResourceKind::Fc => {
                let handle = clock.offload(chunk.resource_id, &exec.accel, chunk, |b, e| {
                    body.accel_operator(b, e)
                })?;
                Ok(InFlight {
                    chunk,
                    start: now,
                    handle: Some(handle),
                    result: Ok(()),
                })
            }
        }
    };

    for t in tokens {
        if let Some(chunk) = part.next_chunk(t.kind, t.id) {
            let f = start(&mut clock, chunk)?;
            in_flight.insert((t.kind, t.id), f);
        }
    }

    while let Some(key) = clock.advance_checked(!in_flight.is_empty())? {
        let slot = (key.kind, key.resource_id);
        let Some(done) = in_flight.remove(&slot) else {
            continue;
        };
        let result = match &done.handle {
            Some(h) => accel::wait(h, exec.wait)?.result,
            None => done.result,
        };
        let token = Token {
            kind: key.kind,
            id: key.resource_id,
        };
        if let Err(error) = result {
            // Drain: nothing new is claimed, in-flight chunks still complete.
            part.abort();
            if failure.is_none() {
                failure = Some(Failure {
                    token,
                    chunk: done.chunk,
                    error,
                });
            }
            continue;
        }
        let elapsed = (key.at - done.start).max(MIN_TICK);
        let mut rec = record_for(&done.chunk, done.start, done.start + elapsed);
        let (f_after, next) =
            part.complete_and_claim(key.kind, key.resource_id, Some((done.chunk.len(), elapsed.as_secs_f64())))?;
        rec.f_after = f_after.unwrap_or(rec.f_after);
        trace.push(rec);
        if let Some(chunk) = next {
            let f = start(&mut clock, chunk)?;
            in_flight.insert(slot, f);
        }
    }

    finish(part, tokens, trace, clock.now(), Vec::new(), failure)
}

#[derive(Default)]
struct TokenOutcome {
    records: Vec<TraceRecord>,
    warnings: Vec<String>,
}

struct Shared<'a> {
    part: &'a Partitioner,
    origin: Instant,
    failure: Mutex<Option<Failure>>,
}

impl Shared<'_> {
    fn fail(&self, token: Token, chunk: ChunkDescriptor, error: BodyError) {
        self.part.abort();
        let mut slot = self.failure.lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_none() {
            *slot = Some(Failure { token, chunk, error });
        }
    }
}

fn run_wall<B: LoopBody>(
    part: &Partitioner,
    tokens: &[Token],
    body: &B,
    exec: &ExecConfig,
) -> Result<RunReport, EngineError> {
    let shared = Shared {
        part,
        origin: Instant::now(),
        failure: Mutex::new(None),
    };
    let outcomes: Vec<Result<TokenOutcome, EngineError>> = thread::scope(|s| {
        let shared = &shared;
        let workers: Vec<_> = tokens
            .iter()
            .map(|&token| {
                thread::Builder::new()
                    .name(token.to_string())
                    .spawn_scoped(s, move || match token.kind {
                        ResourceKind::Cc => cpu_token_loop(token, shared, body),
                        ResourceKind::Fc => {
                            let unit = FcUnit::spawn(s, token.id, exec.accel, shared.origin);
                            accel_token_loop(token, shared, body, &unit, exec.wait)
                        }
                    })
                    .expect("failed to spawn token thread")
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    let wall_time = shared.origin.elapsed();

    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        trace.extend(outcome.records);
        warnings.extend(outcome.warnings);
    }
    let failure = shared.failure.into_inner().unwrap_or_else(|e| e.into_inner());
    finish(part, tokens, trace, wall_time, warnings, failure)
}

/// Claim/execute loop of one CPU token.
fn cpu_token_loop<B: LoopBody>(
    token: Token,
    shared: &Shared<'_>,
    body: &B,
) -> Result<TokenOutcome, EngineError> {
    let mut out = TokenOutcome::default();
    let mut finished: Option<(TraceRecord, Duration)> = None;
    loop {
        let prev = finished.as_ref().map(|(r, d)| (r.size(), d.as_secs_f64()));
        let (f_after, next) = shared.part.complete_and_claim(token.kind, token.id, prev)?;
        if let Some((mut rec, _)) = finished.take() {
            rec.f_after = f_after.unwrap_or(rec.f_after);
            out.records.push(rec);
        }
        let Some(chunk) = next else { break };
        let t_start = shared.origin.elapsed();
        let result = body.cpu_operator(chunk.begin, chunk.end);
        let t_end = shared.origin.elapsed().max(t_start + MIN_TICK);
        if let Err(error) = result {
            shared.fail(token, chunk, error);
            break;
        }
        finished = Some((record_for(&chunk, t_start, t_end), t_end - t_start));
    }
    Ok(out)
}

/// Claim/offload/wait loop of one accelerator token.
fn accel_token_loop<'scope, B: LoopBody>(
    token: Token,
    shared: &Shared<'_>,
    body: &'scope B,
    unit: &FcUnit<'scope>,
    discipline: WaitDiscipline,
) -> Result<TokenOutcome, EngineError> {
    let mut out = TokenOutcome::default();
    let mut finished: Option<(TraceRecord, Duration)> = None;
    loop {
        let prev = finished.as_ref().map(|(r, d)| (r.size(), d.as_secs_f64()));
        let (f_after, next) = shared.part.complete_and_claim(token.kind, token.id, prev)?;
        if let Some((mut rec, _)) = finished.take() {
            rec.f_after = f_after.unwrap_or(rec.f_after);
            out.records.push(rec);
        }
        let Some(chunk) = next else { break };
        let handle = match unit.offload(chunk, move |b, e| body.accel_operator(b, e)) {
            Ok(h) => h,
            Err(e) => {
                shared.part.abort();
                return Err(e.into());
            }
        };
        let done = accel::wait(&handle, discipline)?;
        if let Err(error) = done.result {
            shared.fail(token, chunk, error);
            break;
        }
        if done.overran {
            out.warnings.push(format!(
                "{token}: chunk [{}, {}) computed longer than its modeled {:?}",
                chunk.begin, chunk.end, handle.modeled_duration
            ));
        }
        let t_start = handle.submitted_at;
        let t_end = done.completed_at.max(t_start + MIN_TICK);
        finished = Some((record_for(&chunk, t_start, t_end), t_end - t_start));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{FnBody, NoopBody};
    use crate::trace::check_coverage;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn virt(cc_rate: f64, fc_rate: f64, fc_overhead: f64, units: usize) -> ExecConfig {
        ExecConfig::virtual_time(
            CostModel::new(cc_rate, 0.0),
            AccelModel::new(units, fc_rate, fc_overhead),
        )
    }

    /// Body that writes `i * 3 + 1` into slot `i`, counting executions.
    struct Slots(Vec<AtomicU64>);

    impl Slots {
        fn new(n: usize) -> Self {
            Self((0..n).map(|_| AtomicU64::new(0)).collect())
        }

        fn values(&self) -> Vec<u64> {
            self.0.iter().map(|a| a.load(Ordering::Relaxed)).collect()
        }

        fn fill(&self, b: usize, e: usize) -> Result<(), BodyError> {
            for i in b..e {
                self.0[i].fetch_add(i as u64 * 3 + 1, Ordering::Relaxed);
            }
            Ok(())
        }
    }

    impl LoopBody for Slots {
        fn cpu_operator(&self, b: usize, e: usize) -> Result<(), BodyError> {
            self.fill(b, e)
        }

        fn accel_operator(&self, b: usize, e: usize) -> Result<(), BodyError> {
            self.fill(b, e)
        }
    }

    #[test]
    fn token_layout() {
        let names = |c, a| {
            make_tokens(&SchedulerConfig::new(10, c, a, 1))
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(names(2, 1), ["CC0", "CC1", "FC0"]);
        assert_eq!(names(0, 1), ["FC0"]);
        assert_eq!(names(4, 4).len(), 8);
    }

    #[test]
    fn empty_range() {
        let cfg = SchedulerConfig::new(0, 2, 1, 16);
        for exec in [virt(1.0, 1.0, 0.0, 1), ExecConfig::wall_clock(AccelModel::new(1, 1e9, 0.0), WaitDiscipline::Interrupt)] {
            let r = parallel_for(5, 5, &NoopBody, &cfg, &exec).unwrap();
            assert_eq!(r.iterations_done, 0);
            assert!(r.trace.is_empty());
        }
    }

    #[test]
    fn single_cpu_is_serial() {
        let slots = Slots::new(100);
        let cfg = SchedulerConfig::new(100, 1, 0, 128);
        let r = parallel_for(0, 100, &slots, &cfg, &virt(1000.0, 1.0, 0.0, 1)).unwrap();
        assert!(r.trace.iter().all(|t| t.kind == ResourceKind::Cc));
        let want: Vec<u64> = (0..100).map(|i| i * 3 + 1).collect();
        assert_eq!(slots.values(), want);
    }

    #[test]
    fn single_cpu_token_chunk_pattern() {
        let cfg = SchedulerConfig::new(10, 1, 0, 128);
        let r = parallel_for(0, 10, &NoopBody, &cfg, &virt(10.0, 1.0, 0.0, 1)).unwrap();
        let sizes: Vec<_> = r.trace.iter().map(|t| t.size()).collect();
        assert_eq!(sizes, [5, 2, 1, 1, 1]);
    }

    #[test]
    fn single_accel_token_chunks() {
        let cfg = SchedulerConfig::new(300, 0, 1, 128);
        let r = parallel_for(0, 300, &NoopBody, &cfg, &virt(1.0, 1000.0, 0.001, 1)).unwrap();
        let sizes: Vec<_> = r.trace.iter().map(|t| t.size()).collect();
        assert_eq!(sizes, [128, 128, 44]);
        for t in &r.trace {
            assert_eq!(t.duration(), Duration::from_secs_f64(0.001 + t.size() as f64 / 1000.0));
        }
    }

    #[test]
    fn failing_accel_operator_names_token() {
        let body = FnBody::new(|_, _| Ok(()), |_, _| Err(BodyError::new("fabric fault")));
        let cfg = SchedulerConfig::new(1000, 2, 1, 64);
        let err = parallel_for(0, 1000, &body, &cfg, &virt(100.0, 400.0, 0.0, 1)).unwrap_err();
        assert!(err.to_string().starts_with("FC0 failed on ["), "{err}");
        match err {
            EngineError::OperatorFailed(f) => {
                assert_eq!(f.token.kind, ResourceKind::Fc);
                assert!(f.partial.iterations_done < 1000);
                assert!(f.partial.trace.iter().all(|t| t.kind == ResourceKind::Cc));
            }
            other => panic!("unexpected {other:?}"),
        }

        let slow_cpu = FnBody::new(
            |_, _| {
                thread::sleep(Duration::from_millis(1));
                Ok(())
            },
            |_, _| Err(BodyError::new("fabric fault")),
        );
        let exec = ExecConfig::wall_clock(AccelModel::new(1, 1e6, 0.0), WaitDiscipline::Interrupt);
        let err = parallel_for(0, 1000, &slow_cpu, &cfg, &exec).unwrap_err();
        assert!(err.to_string().starts_with("FC0 failed"), "{err}");
    }

    #[test]
    fn failing_cpu_operator_drains() {
        let body = FnBody::new(
            |b, e| {
                if (b..e).contains(&500) {
                    Err(BodyError::new("bad row"))
                } else {
                    Ok(())
                }
            },
            |_, _| Ok(()),
        );
        let cfg = SchedulerConfig::new(1000, 2, 0, 16);
        let err = parallel_for(0, 1000, &body, &cfg, &virt(100.0, 1.0, 0.0, 1)).unwrap_err();
        let EngineError::OperatorFailed(f) = err else { panic!() };
        assert_eq!(f.token.kind, ResourceKind::Cc);
        assert!((f.begin..f.end).contains(&500));
        assert!(f.partial.trace.iter().all(|t| t.end <= f.begin || t.begin >= f.end));
    }

    #[test]
    fn config_errors() {
        let cfg = SchedulerConfig::new(10, 1, 2, 4);
        assert!(matches!(
            parallel_for(0, 10, &NoopBody, &cfg, &virt(1.0, 1.0, 0.0, 1)),
            Err(EngineError::NotEnoughUnits { requested: 2, units: 1 })
        ));
        let mut accel = AccelModel::new(1, 1.0, 0.0);
        accel.enable = false;
        let cfg = SchedulerConfig::new(10, 1, 1, 4);
        let exec = ExecConfig::wall_clock(accel, WaitDiscipline::Interrupt);
        assert!(matches!(
            parallel_for(0, 10, &NoopBody, &cfg, &exec),
            Err(EngineError::Accel(AccelError::InterruptDisabled))
        ));
        assert!(matches!(
            parallel_for(5, 4, &NoopBody, &cfg, &virt(1.0, 1.0, 0.0, 1)),
            Err(EngineError::BadRange { .. })
        ));
    }

    #[test]
    fn factor_converges_in_virtual_time() {
        let cfg = SchedulerConfig::new(1024, 2, 1, 128);
        let r = parallel_for(0, 1024, &NoopBody, &cfg, &virt(100.0, 400.0, 0.0, 1)).unwrap();
        assert!((r.final_f - 4.0).abs() / 4.0 < 0.05, "f = {}", r.final_f);
        let fc: usize = r.trace.iter().filter(|t| t.kind == ResourceKind::Fc).map(|t| t.size()).sum();
        assert!(fc * 2 > 1024, "FC did {fc} of 1024");
        check_coverage(&r.trace, 0, 1024).unwrap();
    }

    #[test]
    fn cpu_tokens_never_idle_in_virtual_time() {
        let cfg = SchedulerConfig::new(5000, 3, 2, 64);
        let r = parallel_for(0, 5000, &NoopBody, &cfg, &virt(100.0, 300.0, 0.01, 2)).unwrap();
        for id in 0..3 {
            let mine: Vec<_> = r
                .trace
                .iter()
                .filter(|t| t.kind == ResourceKind::Cc && t.resource_id == id)
                .collect();
            assert_eq!(mine[0].t_start, Duration::ZERO);
            for w in mine.windows(2) {
                assert_eq!(w[1].t_start, w[0].t_end);
            }
        }
    }

    #[test]
    fn wall_clock_heterogeneous_matches_serial() {
        let n = 2000;
        let serial = Slots::new(n);
        parallel_for(0, n, &serial, &SchedulerConfig::new(n, 1, 0, 1), &virt(1.0, 1.0, 0.0, 1)).unwrap();
        for wait in [WaitDiscipline::Interrupt, WaitDiscipline::Spin] {
            let het = Slots::new(n);
            let exec = ExecConfig::wall_clock(AccelModel::new(2, 2e6, 1e-4), wait);
            let r = parallel_for(0, n, &het, &SchedulerConfig::new(n, 2, 2, 100), &exec).unwrap();
            assert_eq!(het.values(), serial.values());
            assert_eq!(r.iterations_done, n);
            check_coverage(&r.trace, 0, n).unwrap();
            for t in r.trace.iter().filter(|t| t.kind == ResourceKind::Fc) {
                assert!(t.duration() >= Duration::from_secs_f64(1e-4 + t.size() as f64 / 2e6));
            }
        }
    }
}
