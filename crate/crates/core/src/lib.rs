pub mod checkpoint;
pub mod causal_aux;
pub mod cma;
pub mod error;
pub mod exec;
pub mod model;
pub mod oracle;
pub mod repr;
pub mod report;
pub mod stats;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
