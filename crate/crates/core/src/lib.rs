//! Flexible job-shop scheduling: instances and benchmark files, the
//! dispatching environment, state features, priority dispatching rules and
//! an exact solver for tiny instances.

pub mod env;
pub mod features;
pub mod fjs;
pub mod instance;
pub mod oracle;
pub mod pdr;

pub use env::{rollout, validate_schedule, Action, ScheduleResult, ScheduleState, Shop};
pub use features::{build_bundle, FeatureBundle};
pub use instance::{FjspInstance, Generator, Job, OperationSpec, Time};
