//! Runtime for an agent that evolves its own toolset while answering a stream
//! of queries.
//!
//! The evolving state is a fixed workflow configuration, a fixed prompt suite
//! and a versioned tool registry. Queries are processed in batches against a
//! frozen registry snapshot; at each batch barrier the tools synthesized by
//! the batch are clustered, merged and committed as the next snapshot.
//!
//! Module map:
//!
//! - [`gateway`]: chat-completion providers (live and scripted) and token accounting
//! - [`prompts`]: the six role templates plus parsers for each role's reply
//! - [`registry`]: immutable registry snapshots, lookup and persistence
//! - [`sandbox`]: tool artifact validation and subprocess execution
//! - [`workflow`]: the per-query manager / developer / executor / integrator machine
//! - [`evolution`]: batch scheduling, tool absorbing and stream folding
//! - [`metrics`] and [`trace`]: convergence metrics, event trace, replay and exports
//! - [`config`]: run configuration shared with the command-line driver

pub mod config;
pub mod evolution;
pub mod gateway;
pub mod metrics;
pub mod prompts;
pub mod registry;
pub mod sandbox;
pub mod schema;
pub mod trace;
pub mod workflow;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use evolution::{Engine, EngineConfig, EvolutionState, QueryInput};
pub use gateway::{AgentRole, ChatExchange, ChatMessage, CompletionResult, Gateway};
pub use metrics::{compute_avg_tokens_per_invocation, compute_egl, compute_success_rate, QuerySample};
pub use registry::{RegistrySnapshot, ToolRecord};
pub use sandbox::{InvocationResult, InvocationStatus, Sandbox, ToolArtifact};
