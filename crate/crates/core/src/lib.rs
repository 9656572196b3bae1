mod binio;
pub mod diffcore;
pub mod error;
pub mod fieldplanes;
pub mod langfield;
pub mod probfield;
pub mod renderer;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
