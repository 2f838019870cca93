pub mod analysis;
pub mod behavior;
pub mod c51;
pub mod cardio;
pub mod decide;
pub mod ensemble;
pub mod error;
pub mod lab_ae;
pub mod nnet;
pub mod physio_ae;
pub mod pipeline;
pub mod replay;
pub mod rl_state;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
