//! Sparse mixture-of-experts motion-tracking policy with KV-cached
//! inference, sequence-level PPO and evaluation metrics.

mod error;
pub mod evalbench;
pub mod kvruntime;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
