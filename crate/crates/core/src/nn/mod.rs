//! Small function-approximation stack: tanh MLPs with hand-written
//! backpropagation, Gaussian/categorical policies, and PPO.

mod adam;
mod mlp;
mod policy;
mod ppo;
mod train;

pub use adam::Adam;
pub use mlp::{rows_to_matrix, Init, Mlp, Tape};
pub use policy::{
    as_matrix, softmax, Actor, CategoricalPolicy, Encoder, GaussianPolicy, Greedy, LogProbGrad,
    ValueFunction,
};
pub use ppo::{clipped_surrogate, gae, ppo_update, Batch, PpoConfig, PpoDiagnostics, PpoLearner};
pub use train::{collect_batch, train_agent, AgentTrainConfig, CurvePoint, TrainOutcome};
