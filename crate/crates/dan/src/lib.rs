//! Dual attention policy network, rollouts and PPO training.

pub mod checkpoint;
pub mod model;
pub mod ppo;
pub mod rollout;
pub mod train;

pub use checkpoint::{load_policy, save_policy, Sidecar};
pub use model::{select_action, BatchIndex, Decision, ModelConfig, Policy, Strategy};
pub use rollout::{run_episodes, solve_greedy, solve_sampling, Trajectory};
pub use train::{train, LogRow, TrainConfig, TrainOutcome};
