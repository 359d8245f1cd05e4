pub mod cl_losses;
pub mod config;
pub mod distill;
pub mod error;
pub mod labels;
pub mod numerics;
pub mod protocol_data;
pub mod rc_block;
pub mod seg_model;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
