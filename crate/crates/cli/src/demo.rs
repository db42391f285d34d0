//! End-to-end reproduction table.

use std::fmt::Write as _;

use cqed_core::config::RunConfig;
use cqed_core::coupled::{eigen_energies, exciton_branch_lifetime, figures_of_merit, infer_bare_lifetime};
use cqed_core::dynamics::{cw_g2, DecayChannel, HilbertConfig};
use cqed_core::error::{Error, Result};
use cqed_core::scenarios::{measure_correlations, red_detuned, stream_g2, Calibration};
use cqed_core::spectral::{extract_coupling, fit_series, synthetic_series, ExtractionMethod, SeriesSpec};
use cqed_core::trajectory::{ChannelSet, ClickChannel};
use cqed_core::Duration;

const BUNDLED: &str = include_str!("../configs/pillar2.json");

/// Detuning of the lifetime measurement, nm.
const LIFETIME_DETUNING_NM: f64 = 0.7;
/// Reservoir mean of the above-band row.
const ABOVE_BAND_RESERVOIR: f64 = 2.0;

pub fn bundled_config() -> Result<RunConfig> {
    RunConfig::from_json(BUNDLED)
}

/// Re-tags an error with the pipeline stage it came from.
fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("stage {name}: {m}")),
        Error::NonConvergence(m) => Error::NonConvergence(format!("stage {name}: {m}")),
        Error::InsufficientStatistics(m) => Error::InsufficientStatistics(format!("stage {name}: {m}")),
        Error::Parse { line, msg } => Error::Parse { line, msg: format!("stage {name}: {msg}") },
        Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("stage {name}: {e}"))),
    })
}

struct Row {
    quantity: &'static str,
    reference: f64,
    computed: f64,
    lo: f64,
    hi: f64,
}

impl Row {
    fn band(quantity: &'static str, reference: f64, computed: f64, tol: f64) -> Self {
        Row { quantity, reference, computed, lo: reference - tol, hi: reference + tol }
    }

    fn pass(&self) -> bool {
        (self.lo..=self.hi).contains(&self.computed)
    }
}

pub fn run(cfg: &RunConfig, seed: u64) -> Result<String> {
    let p = stage("device", cfg.device.params())?;
    let mut rows = Vec::new();

    let pair = eigen_energies(&p);
    let fom = stage("eigen", figures_of_merit(p.coupling, p.gamma_c, p.gamma_x))?;
    rows.push(Row::band("vacuum_rabi_splitting_ueV", 56.0, pair.splitting().uev(), 0.5));
    rows.push(Row::band("g_over_gamma_c", 0.41, p.coupling.uev() / p.gamma_c.uev(), 0.005));
    rows.push(Row::band("purcell_factor", 61.0, fom.purcell, 7.0));
    rows.push(Row::band("quantum_efficiency", 0.973, fom.efficiency, 0.004));

    let detuned = red_detuned(&p, LIFETIME_DETUNING_NM);
    let branch = stage("lifetime", exciton_branch_lifetime(&detuned))?.ps();
    rows.push(Row::band("exciton_branch_lifetime_ps", 620.0, branch, 70.0));
    let bare = stage(
        "lifetime",
        infer_bare_lifetime(Duration::from_ps(620.0), detuned.detuning(), p.coupling, p.gamma_c),
    )?
    .ps();
    rows.push(Row::band("bare_exciton_lifetime_ps", 700.0, bare, 80.0));

    let spec = SeriesSpec::pillar(p.gamma_x, p.gamma_c, p.coupling);
    let series = stage("spectra", synthetic_series(&spec, seed))?;
    let (_, curve) = stage("spectral fit", fit_series(&series))?;
    let x = stage("coupling extraction", extract_coupling(&curve, ExtractionMethod::GlobalFit))?;
    let g = x.g.ok_or_else(|| Error::InsufficientStatistics("stage coupling extraction: splitting not resolved".into()))?;
    rows.push(Row::band("fitted_g_ueV", p.coupling.uev(), g.uev(), 0.05 * p.coupling.uev()));
    rows.push(Row::band("fitted_gamma_c_ueV", p.gamma_c.uev(), x.gamma_c.uev(), 0.05 * p.gamma_c.uev()));

    let taus: Vec<f64> = (0..=400).map(|i| 0.25 * i as f64).collect();
    let model = stage("cw correlation", cfg.device.model())?.with_exciton_pump(1e-4);
    let curve = stage("cw correlation", cw_g2(&model, HilbertConfig::new(3)?, DecayChannel::Exciton, &taus))?;
    let dip = curve.recovery_time().ok_or_else(|| Error::NonConvergence("stage cw correlation: dip never recovers".into()))?;
    rows.push(Row { quantity: "cw_dip_width_ps", reference: 15.0, computed: dip, lo: 10.0, hi: 25.0 });

    let cal = Calibration::default();
    let duration = cfg.analysis.duration_ps;
    let set = stage("photon statistics", measure_correlations(&cal, &cfg.detectors, &cfg.analysis, duration, seed))?;
    rows.push(Row::band("flux_ratio_c_over_x", 3.5, set.flux_ratio, 0.35));
    rows.push(Row::band("g2_rr_zero", 0.18, set.resonant.value, 0.08));
    rows.push(Row::band("g2_xx_zero", 0.19, set.exciton.value, 0.08));
    rows.push(Row::band("g2_cc_zero", 0.39, set.cavity.value, 0.08));
    rows.push(Row::band("g2_xc_zero", 0.22, set.cross.value, 0.08));

    let above = stage("above-band", cal.above_band(0.0, ABOVE_BAND_RESERVOIR))?;
    let stream = stage("above-band", above.simulate(&cfg.detectors, duration, seed.wrapping_add(2)))?;
    let both = ChannelSet::of(&[ClickChannel::C, ClickChannel::X]);
    let g_ab = stage("above-band", stream_g2(&stream, both, None, cal.rep_period, &cfg.analysis))?;
    rows.push(Row { quantity: "g2_rr_zero_above_band", reference: 0.925, computed: g_ab.value, lo: 0.85, hi: 1.0 });

    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>10} {:>12} {:>22} result", "quantity", "reference", "computed", "accepted");
    for r in &rows {
        let _ = writeln!(
            s,
            "{:<28} {:>10.4} {:>12.4} {:>22} {}",
            r.quantity,
            r.reference,
            r.computed,
            format!("[{:.4}, {:.4}]", r.lo, r.hi),
            if r.pass() { "PASS" } else { "FAIL" }
        );
    }
    let passed = rows.iter().filter(|r| r.pass()).count();
    let _ = writeln!(s, "passed={passed}/{}", rows.len());
    let _ = writeln!(s, "seed={seed}");
    let _ = writeln!(s, "confighash={}", cfg.hash());
    Ok(s)
}
