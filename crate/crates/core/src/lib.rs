pub mod autodiff;
pub mod benchmark;
pub mod data;
pub mod encoder;
pub mod imaging;
pub mod metrics;
pub mod objectives;
pub mod parallel;
pub mod retrieval;
pub mod trainer;
