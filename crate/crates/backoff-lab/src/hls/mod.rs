//! High-level states, the backoff-bounding transition rule, the volume
//! process and the VEB composite simulation.

pub mod rule;
pub mod state;
pub mod veb;
pub mod volume;

pub use rule::{check_axioms, hls, hls_with_f, is_back_transition, sample_domain, AxiomViolation, Outcome, RuleTag, RuleVariant, Sample};
pub use state::{HighLevelState, HlsContext, HlsError, RuleConstants, StateType};
pub use veb::{veb_run, VebConfig, VebTrace, VebTransition};
pub use volume::VolumeState;
