pub mod elbo;
pub mod error;
pub mod experts;
pub mod geomkin;
pub mod gmmops;
pub mod hmc;
pub mod linalg;
pub mod metrics;
pub mod poelearn;
pub mod special;
pub mod varfam;

pub use error::{Error, Result};
