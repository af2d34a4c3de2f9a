pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gan;
pub mod losses;
pub mod nn;
pub mod simulate;
pub mod tensor;
pub mod trainer;
