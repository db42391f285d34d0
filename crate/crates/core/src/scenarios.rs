//! Reference device and calibrated pump scenarios for photon statistics.
//!
//! The device is the 35/85 µeV pillar with a 700 ps bare exciton lifetime.
//! Pump-side quantities that a measurement does not fix directly are set by
//! [`Calibration`]:
//!
//! * the off-resonant exciton-to-cavity transfer is solved so that, together
//!   with the background flux, channel C is `flux_ratio` times brighter than
//!   channel X at the red detuning;
//! * the background flux is a fixed fraction of the detected cavity flux;
//! * a small recapture reservoir gives the dot its residual multi-photon
//!   probability.
//!
//! Above-band pumping keeps the same device and raises the background so
//! the off-resonant C:X ratio is `above_band_brightening` times larger.

use serde::{Deserialize, Serialize};

use crate::config::{AnalysisConfig, DeviceConfig, RunConfig};
use crate::coupled::{InitialExcitation, SystemParams};
use crate::dynamics::{photon_yields, HilbertConfig, LindbladModel};
use crate::error::{Error, Result};
use crate::hbt::{correlate_stream, cross_g2_zero, pulsed_g2_zero, G2Estimate};
use crate::trajectory::{simulate_stream, ChannelSet, ClickChannel, ClickStream, DetectorModel, PumpMode, PumpSchedule};
use crate::units::constants::{HBAR_UEV_PS, HC_UEV_NM};
use crate::units::Energy;

pub const CAVITY_WAVELENGTH_NM: f64 = 936.35;
pub const REP_PERIOD_PS: f64 = 13_000.0;
pub const DEVICE_G_UEV: f64 = 35.0;
pub const DEVICE_GAMMA_C_UEV: f64 = 85.0;
pub const DEVICE_EXCITON_LIFETIME_PS: f64 = 700.0;

/// Resonant reference device.
pub fn reference_device() -> SystemParams {
    let ec = Energy::from_uev(HC_UEV_NM / CAVITY_WAVELENGTH_NM);
    SystemParams::new(
        ec,
        ec,
        Energy::from_uev(HBAR_UEV_PS / DEVICE_EXCITON_LIFETIME_PS),
        Energy::from_uev(DEVICE_GAMMA_C_UEV),
        Energy::from_uev(DEVICE_G_UEV),
    )
    .expect("reference device parameters are valid")
}

/// Exciton moved `nm` to longer wavelength than the cavity (negative
/// detuning for `nm > 0`).
pub fn red_detuned(p: &SystemParams, nm: f64) -> SystemParams {
    let lc = HC_UEV_NM / p.cavity.uev();
    p.at_detuning(Energy::from_uev(HC_UEV_NM / (lc + nm) - HC_UEV_NM / lc))
}

/// Photons emitted per dot excitation, `(cavity, exciton)`.
pub fn dot_yields(model: &LindbladModel) -> Result<(f64, f64)> {
    photon_yields(model, HilbertConfig::default(), InitialExcitation::ExcitonExcited)
}

/// Exciton-to-cavity transfer rate (1/ps) at which the dot alone emits
/// `ratio` times more photons through the cavity than through the exciton
/// channel.
pub fn cavity_feed_for_ratio(p: &SystemParams, ratio: f64) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::invalid(format!("yield ratio must be > 0, got {ratio}")));
    }
    let base = LindbladModel::from_params(p);
    let ratio_at = |feed: f64| -> Result<f64> {
        let (c, x) = dot_yields(&base.with_cavity_feed(feed))?;
        Ok(c / x)
    };
    if ratio_at(0.0)? >= ratio {
        return Err(Error::invalid(format!("radiative coupling alone already exceeds a C:X yield ratio of {ratio}")));
    }
    let (mut lo, mut hi) = (1e-9f64, 10.0f64);
    if ratio_at(hi)? < ratio {
        return Err(Error::numerical("cavity feed bracket does not reach the requested ratio"));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if ratio_at(mid)? < ratio {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Pump-side calibration of the photon-statistics scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    /// Detected C:X flux ratio at the red detuning.
    pub flux_ratio: f64,
    pub detuning_nm: f64,
    /// Background share of the detected cavity flux at the red detuning.
    pub off_resonant_background_fraction: f64,
    /// Background share of the total flux at resonance.
    pub resonant_background_fraction: f64,
    /// Mean number of carriers recaptured by the dot after each pulse.
    pub recapture_mean: f64,
    /// 1/ps.
    pub capture_rate: f64,
    /// Growth of the off-resonant C:X ratio under above-band pumping.
    pub above_band_brightening: f64,
    pub rep_period: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            flux_ratio: 3.5,
            detuning_nm: 0.4,
            off_resonant_background_fraction: 0.127,
            resonant_background_fraction: 0.02,
            recapture_mean: 0.09,
            capture_rate: 0.01,
            above_band_brightening: 5.0,
            rep_period: REP_PERIOD_PS,
        }
    }
}

/// Device plus pump for one simulated measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub model: LindbladModel,
    pub pump: PumpSchedule,
}

impl Scenario {
    pub fn simulate(&self, det: &DetectorModel, duration_ps: f64, seed: u64) -> Result<ClickStream> {
        simulate_stream(&self.model, &self.pump, det, duration_ps, seed)
    }

    pub fn run_config(&self, detectors: DetectorModel, analysis: AnalysisConfig, seed: u64) -> RunConfig {
        let m = &self.model;
        RunConfig {
            device: DeviceConfig {
                exciton_uev: m.exciton.uev(),
                cavity_uev: m.cavity.uev(),
                gamma_x_uev: m.gamma_x.uev(),
                gamma_c_uev: m.gamma_c.uev(),
                g_uev: m.coupling.uev(),
                cavity_feed_per_ps: m.cavity_feed,
                dephasing_per_ps: m.dephasing,
            },
            pump: self.pump,
            detectors,
            analysis,
            seed,
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        let frac = [self.off_resonant_background_fraction, self.resonant_background_fraction];
        if frac.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(Error::invalid("background fractions must lie in [0, 1)"));
        }
        if !(self.flux_ratio > 0.0 && self.detuning_nm > 0.0 && self.rep_period > 0.0) {
            return Err(Error::invalid("flux_ratio, detuning_nm and rep_period must be > 0"));
        }
        if !(self.recapture_mean >= 0.0 && self.capture_rate > 0.0 && self.above_band_brightening >= 1.0) {
            return Err(Error::invalid("recapture_mean >= 0, capture_rate > 0 and above_band_brightening >= 1 required"));
        }
        Ok(())
    }

    /// Device model with the calibrated transfer rate, at the given detuning
    /// (nm to the red; zero is resonance).
    pub fn model(&self, detuning_nm: f64) -> Result<LindbladModel> {
        self.validate()?;
        let reference = reference_device();
        let detuned = red_detuned(&reference, self.detuning_nm);
        let feed = cavity_feed_for_ratio(&detuned, self.flux_ratio * (1.0 - self.off_resonant_background_fraction))?;
        let at = if detuning_nm == 0.0 { reference } else { red_detuned(&reference, detuning_nm) };
        Ok(LindbladModel::from_params(&at).with_cavity_feed(feed))
    }

    /// Dot photons per pulse before channel splitting.
    fn photons_per_pulse(&self, reservoir_mean: f64) -> f64 {
        1.0 + reservoir_mean
    }

    fn pump(&self, background_per_pulse: f64) -> PumpSchedule {
        PumpSchedule::pulsed(self.rep_period, 1.0)
            .with_reservoir(self.recapture_mean, self.capture_rate)
            .with_background(background_per_pulse / self.rep_period)
    }

    /// Resonant pump, dot at the red detuning.
    pub fn off_resonant(&self) -> Result<Scenario> {
        let model = self.model(self.detuning_nm)?;
        let (c, x) = dot_yields(&model)?;
        let n = self.photons_per_pulse(self.recapture_mean);
        let background = (self.flux_ratio * x - c).max(0.0) * n;
        Ok(Scenario { model, pump: self.pump(background) })
    }

    /// Resonant pump, dot at resonance.
    pub fn resonant(&self) -> Result<Scenario> {
        let model = self.model(0.0)?;
        let (c, x) = dot_yields(&model)?;
        let f = self.resonant_background_fraction;
        let background = f / (1.0 - f) * (c + x) * self.photons_per_pulse(self.recapture_mean);
        Ok(Scenario { model, pump: self.pump(background) })
    }

    /// Background photons per pulse under above-band pumping.
    pub fn above_band_background(&self) -> Result<f64> {
        let model = self.model(self.detuning_nm)?;
        let (c, x) = dot_yields(&model)?;
        let n = self.photons_per_pulse(self.recapture_mean);
        Ok((self.above_band_brightening * self.flux_ratio * x - c).max(0.0) * n)
    }

    /// Above-band pump at the given detuning with reservoir mean
    /// `reservoir_mean`.
    pub fn above_band(&self, detuning_nm: f64, reservoir_mean: f64) -> Result<Scenario> {
        let model = self.model(detuning_nm)?;
        let background = self.above_band_background()?;
        let pump = PumpSchedule {
            mode: PumpMode::AboveBandPulsed,
            reservoir_mean,
            ..self.pump(background)
        };
        Ok(Scenario { model, pump })
    }
}

/// Pulsed `g²(0)` of a channel selection, or cross-correlation when `b` is
/// given, with the analysis window and side-peak count of `analysis`.
pub fn stream_g2(
    stream: &ClickStream,
    a: ChannelSet,
    b: Option<ChannelSet>,
    rep_period: f64,
    analysis: &AnalysisConfig,
) -> Result<G2Estimate> {
    let window = analysis.window_periods.max(analysis.side_peaks as f64 + 0.5) * rep_period;
    let h = correlate_stream(stream, a, b, window, analysis.bin_ps)?;
    match b {
        None => pulsed_g2_zero(&h, rep_period, analysis.side_peaks),
        Some(_) => cross_g2_zero(&h, rep_period, analysis.side_peaks),
    }
}

/// The four correlation measurements: resonance (both lines), and at the
/// red detuning exciton-only, cavity-only and exciton-cavity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationSet {
    pub resonant: G2Estimate,
    pub exciton: G2Estimate,
    pub cavity: G2Estimate,
    pub cross: G2Estimate,
    /// Detected C:X flux ratio at the red detuning.
    pub flux_ratio: f64,
}

pub fn measure_correlations(
    cal: &Calibration,
    det: &DetectorModel,
    analysis: &AnalysisConfig,
    duration_ps: f64,
    seed: u64,
) -> Result<CorrelationSet> {
    let c = ChannelSet::of(&[ClickChannel::C]);
    let x = ChannelSet::of(&[ClickChannel::X]);
    let both = ChannelSet::of(&[ClickChannel::C, ClickChannel::X]);
    let rep = cal.rep_period;
    let on = cal.resonant()?.simulate(det, duration_ps, seed)?;
    let off = cal.off_resonant()?.simulate(det, duration_ps, seed.wrapping_add(1))?;
    let nx = off.count(ClickChannel::X);
    if nx == 0 {
        return Err(Error::stats("no exciton-channel clicks"));
    }
    Ok(CorrelationSet {
        resonant: stream_g2(&on, both, None, rep, analysis)?,
        exciton: stream_g2(&off, x, None, rep, analysis)?,
        cavity: stream_g2(&off, c, None, rep, analysis)?,
        cross: stream_g2(&off, x, Some(c), rep, analysis)?,
        flux_ratio: off.count(ClickChannel::C) as f64 / nx as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feed_hits_the_requested_yield_ratio() {
        let p = red_detuned(&reference_device(), 0.4);
        let feed = cavity_feed_for_ratio(&p, 3.0).unwrap();
        let (c, x) = dot_yields(&LindbladModel::from_params(&p).with_cavity_feed(feed)).unwrap();
        assert!((c / x / 3.0 - 1.0).abs() < 1e-9, "{}", c / x);
        assert!((c + x - 1.0).abs() < 1e-6, "one photon per excitation");
    }

    #[test]
    fn red_detuning_lowers_the_exciton() {
        let p = red_detuned(&reference_device(), 0.4);
        let d = p.detuning().uev();
        assert!(d < -560.0 && d > -570.0, "{d}");
    }

    #[test]
    fn calibrated_background_sets_the_flux_ratio() {
        let cal = Calibration::default();
        let s = cal.off_resonant().unwrap();
        let (c, x) = dot_yields(&s.model).unwrap();
        let n = 1.0 + cal.recapture_mean;
        let b = s.pump.background_feed_rate * cal.rep_period;
        assert!(((c * n + b) / (x * n) - 3.5).abs() < 1e-9);
        assert!((b / (c * n + b) - cal.off_resonant_background_fraction).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_fractions() {
        let cal = Calibration { resonant_background_fraction: 1.0, ..Calibration::default() };
        assert!(cal.resonant().is_err());
    }
}
