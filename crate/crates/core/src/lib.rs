pub mod attention;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod search;

pub use error::{Error, Result};
