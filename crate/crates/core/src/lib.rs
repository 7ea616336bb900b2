//! Token-level MDP agent with long-term memory, a synthetic product-QA
//! environment, and session-level policy optimization.

pub mod env;
pub mod executor;
pub mod harness;
pub mod ids;
pub mod learn;
pub mod memory;
pub mod policy;
pub mod token;
pub mod trajectory;

pub use env::{Environment, EnvError, QuestionKind, SyntheticTask, TaskParams};
pub use executor::{
    AgentState, Capabilities, Decider, ExecError, Executor, ExecutorConfig, ExpertDemonstrator,
    PolicyDecider,
};
pub use ids::{KnowledgeKey, ProductId, QuestionId};
pub use memory::{MemoryStore, similarity};
pub use policy::{DecisionKind, DecisionPoint, PolicyParams, SelectionMode};
pub use token::{FunctionName, Token, Vocabulary};
pub use trajectory::{SessionTrajectory, Trajectory};
