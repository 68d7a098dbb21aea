pub mod crypto;
pub mod dataset;
pub mod geo;
pub mod npe;
pub mod numerics;
pub mod metrics;
pub mod pretrain;
pub mod poe;
pub mod anonymize;
pub mod pipeline;

pub type Matrix = numerics::Matrix<f64>;
pub type NpeModel = npe::NpeModel<f64>;
pub type PoeModel = poe::PoeModel<f64>;
