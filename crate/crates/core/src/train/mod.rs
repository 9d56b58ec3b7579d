//! Training objective, optimizer loop and gradient verification.

pub mod fit;
pub mod gradcheck;
pub mod loss;

pub use fit::{fit, Adam, HistoryRow, TrainConfig, TrainHistory, HISTORY_COLUMNS};
pub use gradcheck::{
    check_gradients, gradient_check, relative_error, CoordinateCheck, GradCheckOptions, GradCheckReport,
    Stencil,
};
pub use loss::{
    aux_loss, bernoulli_log_prob, categorical_log_prob, elbo_terms, kl_rows, loss_terms, reconstruction_terms,
    total_loss, weighted_total, ClampCounter, Likelihood, LossBreakdown, LossTensors, LossWeights, PROB_FLOOR,
};
