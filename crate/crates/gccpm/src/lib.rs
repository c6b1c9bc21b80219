pub mod analyzer;
pub mod augment;
pub mod codec;
pub mod config;
pub mod data;
pub mod erf;
pub mod img;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;
