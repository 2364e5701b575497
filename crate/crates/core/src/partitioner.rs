//! Iteration-space bookkeeping and chunk sizing.
//!
//! Accelerator tokens take constant chunks of `accel_chunk` iterations. CPU
//! tokens take `min(S_f / f, r / (f + n_cores))` iterations, where `f` is the
//! running estimate of how much faster one accelerator unit is than one CPU
//! core and `r` is the number of iterations not yet handed out. The first term
//! dominates while plenty of work remains; the second is a guided
//! self-scheduling tail that shrinks chunks as the space runs out.

use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp for the speed factor.
pub const F_FLOOR: f64 = 1e-3;
/// Upper clamp for the speed factor.
pub const F_CEIL: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResourceKind {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "FC")]
    Fc,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceKind::Cc => f.write_str("CC"),
            ResourceKind::Fc => f.write_str("FC"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("at least one CPU or accelerator token is required")]
    NoResources,
    #[error("accelerator chunk size must be >= 1 when accelerator tokens are present")]
    ZeroAccelChunk,
    #[error("initial speed factor must be finite and > 0, got {0}")]
    BadInitialFactor(f64),
    #[error("speed-factor smoothing weight must lie in [0, 1], got {0}")]
    BadSmoothing(f64),
    #[error("minimum CPU chunk must be >= 1")]
    ZeroMinChunk,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("chunk timing needs a positive size, got {0}")]
    ZeroSize(usize),
    #[error("chunk timing needs a finite positive duration, got {0}")]
    BadDuration(f64),
}

/// Static parameters of one partitioned loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    /// Total iteration count.
    pub n: usize,
    /// CPU tokens.
    pub n_cores: usize,
    /// Accelerator tokens.
    pub n_accel: usize,
    /// Accelerator chunk size `S_f`.
    pub accel_chunk: usize,
    pub f_init: f64,
    /// EWMA weight given to the newest per-iteration time.
    pub f_alpha: f64,
    pub min_chunk: usize,
}

impl SchedulerConfig {
    pub fn new(n: usize, n_cores: usize, n_accel: usize, accel_chunk: usize) -> Self {
        Self {
            n,
            n_cores,
            n_accel,
            accel_chunk,
            f_init: 1.0,
            f_alpha: 0.5,
            min_chunk: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_cores + self.n_accel == 0 {
            return Err(ConfigError::NoResources);
        }
        if self.n_accel > 0 && self.accel_chunk == 0 {
            return Err(ConfigError::ZeroAccelChunk);
        }
        if !(self.f_init.is_finite() && self.f_init > 0.0) {
            return Err(ConfigError::BadInitialFactor(self.f_init));
        }
        if !(0.0..=1.0).contains(&self.f_alpha) {
            return Err(ConfigError::BadSmoothing(self.f_alpha));
        }
        if self.min_chunk == 0 {
            return Err(ConfigError::ZeroMinChunk);
        }
        Ok(())
    }
}

/// Live partitioning state. Always accessed under the partitioner's lock.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub remaining: usize,
    pub next_index: usize,
    pub f: f64,
    pub cc_time_per_iter: Option<f64>,
    pub fc_time_per_iter: Option<f64>,
    pub chunks_issued: u64,
    pub aborted: bool,
}

/// A half-open range `[begin, end)` handed to one token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkDescriptor {
    pub begin: usize,
    pub end: usize,
    pub kind: ResourceKind,
    pub resource_id: usize,
    pub seq: u64,
    /// Remaining iterations just before this chunk was claimed.
    pub r_before: usize,
    /// Speed factor used to size this chunk.
    pub f_at_issue: f64,
}

impl ChunkDescriptor {
    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin >= self.end
    }
}

/// CPU chunk size for `remaining` iterations at speed factor `f`: the floor of
/// `min(S_f / f, r / (f + n_cores))`, raised to `min_chunk` and capped at `remaining`.
pub fn cpu_chunk_size(cfg: &SchedulerConfig, remaining: usize, f: f64) -> usize {
    if remaining == 0 {
        return 0;
    }
    let by_accel = cfg.accel_chunk as f64 / f;
    let guided = remaining as f64 / (f + cfg.n_cores as f64);
    let raw = by_accel.min(guided).floor();
    let size = if raw.is_finite() && raw > 0.0 { raw as usize } else { 0 };
    size.max(cfg.min_chunk).min(remaining)
}

pub fn accel_chunk_size(cfg: &SchedulerConfig, remaining: usize) -> usize {
    cfg.accel_chunk.max(1).min(remaining)
}

/// Shared partitioner. Every public method takes the state lock exactly once,
/// so claims and speed-factor updates are linearizable.
#[derive(Debug)]
pub struct Partitioner {
    cfg: SchedulerConfig,
    begin: usize,
    state: Mutex<SchedulerState>,
}

impl Partitioner {
    pub fn new(begin: usize, cfg: SchedulerConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let state = SchedulerState {
            remaining: cfg.n,
            next_index: begin,
            f: cfg.f_init,
            cc_time_per_iter: None,
            fc_time_per_iter: None,
            chunks_issued: 0,
            aborted: false,
        };
        Ok(Self {
            cfg,
            begin,
            state: Mutex::new(state),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn begin(&self) -> usize {
        self.begin
    }

    pub fn end(&self) -> usize {
        self.begin + self.cfg.n
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SchedulerState> {
        // A panic while holding the lock cannot leave the counters half-updated:
        // every mutation below is a handful of plain assignments.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn next_accel_chunk(&self, resource_id: usize) -> Option<ChunkDescriptor> {
        let mut st = self.lock();
        self.claim(&mut st, ResourceKind::Fc, resource_id)
    }

    pub fn next_cpu_chunk(&self, resource_id: usize) -> Option<ChunkDescriptor> {
        let mut st = self.lock();
        self.claim(&mut st, ResourceKind::Cc, resource_id)
    }

    pub fn next_chunk(&self, kind: ResourceKind, resource_id: usize) -> Option<ChunkDescriptor> {
        let mut st = self.lock();
        self.claim(&mut st, kind, resource_id)
    }

    /// Folds one finished chunk into the per-kind time estimates and returns
    /// the updated speed factor.
    pub fn record_chunk_timing(
        &self,
        kind: ResourceKind,
        size: usize,
        duration: f64,
    ) -> Result<f64, TimingError> {
        let mut st = self.lock();
        self.update_timing(&mut st, kind, size, duration)
    }

    /// Records the timing of a token's previous chunk (if any) and claims its
    /// next one in a single critical section. The returned chunk is therefore
    /// sized with exactly the `f` that the update produced.
    pub fn complete_and_claim(
        &self,
        kind: ResourceKind,
        resource_id: usize,
        finished: Option<(usize, f64)>,
    ) -> Result<(Option<f64>, Option<ChunkDescriptor>), TimingError> {
        let mut st = self.lock();
        let f_after = match finished {
            Some((size, duration)) => Some(self.update_timing(&mut st, kind, size, duration)?),
            None => None,
        };
        Ok((f_after, self.claim(&mut st, kind, resource_id)))
    }

    pub fn speed_factor(&self) -> f64 {
        self.lock().f
    }

    pub fn snapshot(&self) -> SchedulerState {
        self.lock().clone()
    }

    /// Stops further claims. Chunks already handed out are unaffected.
    pub fn abort(&self) {
        self.lock().aborted = true;
    }

    fn claim(
        &self,
        st: &mut SchedulerState,
        kind: ResourceKind,
        resource_id: usize,
    ) -> Option<ChunkDescriptor> {
        if st.aborted || st.remaining == 0 {
            return None;
        }
        let size = match kind {
            ResourceKind::Fc => accel_chunk_size(&self.cfg, st.remaining),
            ResourceKind::Cc => cpu_chunk_size(&self.cfg, st.remaining, st.f),
        };
        debug_assert!(size >= 1 && size <= st.remaining);
        let chunk = ChunkDescriptor {
            begin: st.next_index,
            end: st.next_index + size,
            kind,
            resource_id,
            seq: st.chunks_issued,
            r_before: st.remaining,
            f_at_issue: st.f,
        };
        st.next_index += size;
        st.remaining -= size;
        st.chunks_issued += 1;
        Some(chunk)
    }

    fn update_timing(
        &self,
        st: &mut SchedulerState,
        kind: ResourceKind,
        size: usize,
        duration: f64,
    ) -> Result<f64, TimingError> {
        if size == 0 {
            return Err(TimingError::ZeroSize(size));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(TimingError::BadDuration(duration));
        }
        let per_iter = duration / size as f64;
        let alpha = self.cfg.f_alpha;
        let slot = match kind {
            ResourceKind::Cc => &mut st.cc_time_per_iter,
            ResourceKind::Fc => &mut st.fc_time_per_iter,
        };
        *slot = Some(match *slot {
            None => per_iter,
            Some(old) => alpha * per_iter + (1.0 - alpha) * old,
        });
        if let (Some(cc), Some(fc)) = (st.cc_time_per_iter, st.fc_time_per_iter) {
            let ratio = cc / fc;
            st.f = if ratio.is_nan() {
                st.f
            } else {
                ratio.clamp(F_FLOOR, F_CEIL)
            };
        }
        Ok(st.f)
    }
}
