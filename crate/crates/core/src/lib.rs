//! Heterogeneous `parallel_for`: CPU cores and modeled accelerator units share
//! one iteration space through a dynamic chunk partitioner.
//!
//! * [`partitioner`] sizes chunks and tracks the accelerator/CPU speed factor.
//! * [`engine`] runs the token loops, in wall-clock or virtual time.
//! * [`accel`] models accelerator units, offload and completion waits.
//! * [`kernels`] provides the tiled GEMM loop body and its reference oracle.
//! * [`harness`], [`energy`] and [`trace`] are the benchmark front end.

pub mod accel;
pub mod batch;
pub mod body;
pub mod energy;
pub mod engine;
pub mod harness;
pub mod kernels;
pub mod partitioner;
pub mod trace;

pub use accel::{AccelModel, CostModel, WaitDiscipline};
pub use body::{BodyError, LoopBody};
pub use engine::{make_tokens, parallel_for, ClockMode, EngineError, ExecConfig, RunReport, Token};
pub use partitioner::{ChunkDescriptor, Partitioner, ResourceKind, SchedulerConfig};
pub use trace::TraceRecord;
