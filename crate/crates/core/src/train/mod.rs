//! Loss minimization, scheduling, class balancing and evaluation.

mod balance;
mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use balance::upsample_balance;
pub use metrics::{evaluate, predict, ClassMetrics, Confusion, Metrics};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{EarlyStopping, ReduceOnPlateau};
pub use trainer::{train, EpochRecord, TrainConfig, TrainOutcome, Trainer};
pub(crate) use metrics::argmax;
