//! Track-MDP solvers: exact policy computation, tabular Q-learning and a factored
//! actor-critic, plus value iteration over the equivalent belief space.

pub mod actor_critic;
pub mod belief_space;
pub mod candidates;
pub mod exact;
pub mod qlearning;

pub use candidates::{candidate_actions, CandidateMode};
pub use exact::{exact_value_iteration, Continuation, ExactOptions, ValueTable};
