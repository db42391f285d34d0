//! Simulation and analysis of a single quantum dot coupled to a microcavity.

pub mod config;
pub mod coupled;
pub mod dynamics;
pub mod error;
pub mod hbt;
pub mod lm;
pub mod scenarios;
pub mod trajectory;
pub mod spectral;
pub mod units;

pub use coupled::{EigenPair, FiguresOfMerit, SystemParams};
pub use error::{Error, Result};
pub use units::{ComplexEnergy, Duration, Energy, Temperature, Wavelength};
