pub mod butterfly;
pub mod cost;
pub mod data;
pub mod devices;
pub mod error;
pub mod layers;
pub mod numerics;
pub mod training;

pub use error::{OsnnError, Result};
