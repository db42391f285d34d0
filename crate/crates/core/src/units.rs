//! Physical quantities in the toolkit's canonical units.
//!
//! Energies are in µeV, times in ps, wavelengths in nm and temperatures in K.
//! All conversion constants live in [`constants`].

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod constants {
    /// Planck constant times the speed of light, µeV·nm.
    pub const HC_UEV_NM: f64 = 1.239842e9;
    /// Reduced Planck constant, µeV·ps.
    pub const HBAR_UEV_PS: f64 = 658.2120;
}

use constants::{HBAR_UEV_PS, HC_UEV_NM};

/// An energy in µeV. Line centers, linewidths (FWHM), detunings and couplings
/// all use this type.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Energy(f64);

impl Energy {
    pub const ZERO: Energy = Energy(0.0);

    pub const fn from_uev(value: f64) -> Self {
        Energy(value)
    }

    pub const fn uev(self) -> f64 {
        self.0
    }

    pub fn abs(self) -> Self {
        Energy(self.0.abs())
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }

    /// Decay rate in 1/ps of a line with this FWHM.
    pub fn rate_per_ps(self) -> f64 {
        self.0 / HBAR_UEV_PS
    }

    /// Checks the value may be used as a decay linewidth (finite and > 0).
    pub fn require_linewidth(self, what: &str) -> Result<Self> {
        if self.0.is_finite() && self.0 > 0.0 {
            Ok(self)
        } else {
            Err(Error::invalid(format!("{what} must be a positive linewidth, got {} µeV", self.0)))
        }
    }
}

impl fmt::Display for Energy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} µeV", self.0)
    }
}

impl Add for Energy {
    type Output = Energy;
    fn add(self, rhs: Energy) -> Energy {
        Energy(self.0 + rhs.0)
    }
}

impl Sub for Energy {
    type Output = Energy;
    fn sub(self, rhs: Energy) -> Energy {
        Energy(self.0 - rhs.0)
    }
}

impl Neg for Energy {
    type Output = Energy;
    fn neg(self) -> Energy {
        Energy(-self.0)
    }
}

impl Mul<f64> for Energy {
    type Output = Energy;
    fn mul(self, rhs: f64) -> Energy {
        Energy(self.0 * rhs)
    }
}

impl Div<f64> for Energy {
    type Output = Energy;
    fn div(self, rhs: f64) -> Energy {
        Energy(self.0 / rhs)
    }
}

/// Complex mode energy. `re` is the line center and `im` is minus half the
/// FWHM, so decaying modes have `im <= 0` and `fwhm() == 2 * |im|`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComplexEnergy {
    pub re: f64,
    pub im: f64,
}

impl ComplexEnergy {
    pub const fn new(re: f64, im: f64) -> Self {
        ComplexEnergy { re, im }
    }

    /// Mode with the given center and FWHM.
    pub fn from_center_fwhm(center: Energy, fwhm: Energy) -> Self {
        ComplexEnergy { re: center.uev(), im: -0.5 * fwhm.uev() }
    }

    pub fn center(self) -> Energy {
        Energy(self.re)
    }

    pub fn fwhm(self) -> Energy {
        Energy(2.0 * self.im.abs())
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

impl From<Complex64> for ComplexEnergy {
    fn from(z: Complex64) -> Self {
        ComplexEnergy { re: z.re, im: z.im }
    }
}

impl From<ComplexEnergy> for Complex64 {
    fn from(e: ComplexEnergy) -> Self {
        Complex64::new(e.re, e.im)
    }
}

/// Vacuum wavelength in nm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Wavelength(f64);

impl Wavelength {
    pub fn from_nm(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Wavelength(value))
        } else {
            Err(Error::invalid(format!("wavelength must be positive, got {value} nm")))
        }
    }

    pub const fn nm(self) -> f64 {
        self.0
    }
}

/// A time span in ps.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Duration(f64);

impl Duration {
    pub const fn from_ps(value: f64) -> Self {
        Duration(value)
    }

    pub const fn ps(self) -> f64 {
        self.0
    }

    pub fn require_lifetime(self) -> Result<Self> {
        if self.0.is_finite() && self.0 > 0.0 {
            Ok(self)
        } else {
            Err(Error::invalid(format!("lifetime must be positive, got {} ps", self.0)))
        }
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ps", self.0)
    }
}

/// Sample temperature in K.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn from_kelvin(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(Temperature(value))
        } else {
            Err(Error::invalid(format!("temperature must be >= 0 K, got {value}")))
        }
    }

    pub const fn kelvin(self) -> f64 {
        self.0
    }
}

/// Photon energy `hc/λ`.
pub fn wavelength_to_energy(lambda: Wavelength) -> Energy {
    Energy(HC_UEV_NM / lambda.0)
}

pub fn energy_to_wavelength(energy: Energy) -> Result<Wavelength> {
    if !(energy.0.is_finite() && energy.0 > 0.0) {
        return Err(Error::invalid(format!("photon energy must be positive, got {energy}")));
    }
    Ok(Wavelength(HC_UEV_NM / energy.0))
}

/// `|dE/dλ| = hc/λ²` in µeV/nm, used to convert small wavelength intervals.
pub fn energy_per_nm(lambda: Wavelength) -> f64 {
    HC_UEV_NM / (lambda.0 * lambda.0)
}

/// Lifetime `ħ/γ` of a line with FWHM `γ`.
pub fn linewidth_to_lifetime(gamma: Energy) -> Result<Duration> {
    gamma.require_linewidth("linewidth")?;
    Ok(Duration(HBAR_UEV_PS / gamma.0))
}

pub fn lifetime_to_linewidth(tau: Duration) -> Result<Energy> {
    tau.require_lifetime()?;
    Ok(Energy(HBAR_UEV_PS / tau.0))
}

/// Cavity quality factor `E/γ_c`.
pub fn q_factor(energy: Energy, gamma_c: Energy) -> Result<f64> {
    if !(energy.0.is_finite() && energy.0 > 0.0) {
        return Err(Error::invalid(format!("mode energy must be positive, got {energy}")));
    }
    gamma_c.require_linewidth("cavity linewidth")?;
    Ok(energy.0 / gamma_c.0)
}
