//! Training objectives: the pretraining ELBO, log-partition estimators, the
//! reward-posterior losses and the supporting replay buffer and counters.

mod buffer;
mod counter;
mod elbo;
mod head;
mod kl;
mod logz;
mod pp;
mod reward;
mod subtraj;

pub use buffer::{ReplayBuffer, DEFAULT_CAPACITY};
pub use counter::CallCounter;
pub use elbo::{draw_elbo_time, elbo_loss, elbo_loss_batch, elbo_nll_estimate, elbo_term};
pub use head::{HeadOptimizer, LogZHead, LogZHeadConfig};
pub use kl::{ddpp_kl_loss, kl_surrogate, GradEstimator, KlDraw, DEFAULT_KL_DRAWS};
pub use logz::{lemma1_constant, lemma1_optimal_logz, logz_is, logz_mc, pp_batch_loss};
pub use pp::{
    ddpp_is_train_step, ddpp_lb_train_step, ddpp_single_step_loss, noised_batch, PpStepStats,
};
pub use reward::{
    ConstantReward, Reward, RewardModel, TableReward, LOG_REWARD_FLOOR,
};
pub use subtraj::{ddpp_subtrajectory_loss, subtrajectory_path_loss, SubTrajectoryLoss, SubTrajectoryMode};

pub(crate) use reward::check_rows;

/// A scalar loss with its gradient with respect to every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}
