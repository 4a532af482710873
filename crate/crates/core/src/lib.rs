pub mod alpha;
pub mod data;
pub mod dist;
pub mod error;
pub mod regression;
pub mod sim;
pub mod spatial;

pub use error::{Error, ErrorKind, Result};
