//! Set matching and training losses: Hungarian assignment, box costs, and
//! the appearance contrastive loss that replaces classification.

mod hungarian;
mod losses;
pub mod oracle;

pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use losses::{
    appearance_loss, appearance_loss_var, cosine_distance, giou, giou_var, l1_var, match_cost,
    set_prediction_loss, LossWeights, SetLoss, TrackPrediction,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssocError {
    #[error("cost matrix entry ({row},{col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost matrix shape {rows}x{cols} does not match {len} entries")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("duplicate ground-truth id {0} in one frame")]
    DuplicateGtId(u32),
    #[error("zero appearance vector")]
    ZeroVector,
}
