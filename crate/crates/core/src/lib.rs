//! Hierarchical functional maximal correlation: costs, training and
//! spectral analysis for convolutional feature hierarchies.

pub mod autodiff;
pub mod checkpoint;
pub mod costs;
pub mod error;
pub mod hierarchy;
pub mod knn;
pub mod linalg;
pub mod net;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod spectrum;
pub mod telescope;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
