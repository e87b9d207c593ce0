//! Orchestration runtime for heterogeneous robot fleets.
//!
//! Instructions are grounded into plans, steps are assigned to robots by
//! capability, distance and load, a critic scores progress after every
//! result, and a shared memory keeps what any robot has seen. A
//! deterministic simulator stands in for real embodiments.

pub mod config;
pub mod critic;
pub mod event;
pub mod fleet;
pub mod gateway;
pub mod memory;
pub mod model;
pub mod orchestrator;
pub mod scheduler;
pub mod sim;

pub use config::RuntimeConfig;
pub use critic::{decide, CriticConfig, CriticVerdict, Decision};
pub use event::{hash_events, Event, EventBody, EventLog};
pub use fleet::{EmbodimentDescriptor, Fleet, FleetSnapshot, Morphology, Outcome, SkillResult};
pub use gateway::{Gateway, GatewayError, GatewayMode};
pub use memory::{MemoryStore, NavigableResult, ObservationFrame, StructuredFilter};
pub use model::*;
pub use orchestrator::{Clarification, Runtime, RuntimeError};
pub use scheduler::{assign, dispatch_ready, SchedulingConfig};
pub use sim::Scenario;
pub use sim::World;
