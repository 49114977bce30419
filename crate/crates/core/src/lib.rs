pub mod beacon;
pub mod ephemeris;
pub mod error;
pub mod frontend;
pub mod numeric;
pub mod polarization;
pub mod qkd;
pub mod tracking;
pub mod turbulence;

pub use error::{Error, Result};
