#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod error;
pub mod experiments;
pub mod expert;
pub mod planner;
pub mod runtime;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
