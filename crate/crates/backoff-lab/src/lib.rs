//! Simulation and verification toolkit for backoff contention-resolution
//! processes on a multiple-access channel.
pub mod classify;
pub mod engine;
pub mod hls;
pub mod metrics;
pub mod recurrence;
pub mod send_sequence;

pub use classify::{ClassKind, ClassifierConstants};
pub use engine::{Process, ProcessKind, StepReport};
pub use hls::{HighLevelState, HlsContext, StateType};
pub use send_sequence::{Family, SendSequence, SequenceError};
