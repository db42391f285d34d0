use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cqed_core::config::{config_hash, RunConfig};
use cqed_core::coupled::{eigen_energies, figures_of_merit};
use cqed_core::error::{Error, Result};
use cqed_core::hbt::{self, correlate, correlate_stream, subtract_dark_counts, subtract_stream_darks, G2Estimate};
use cqed_core::spectral::{
    assemble_anticrossing, extract_coupling, fit_spectrum, params_at_temperature, ExtractionMethod, Spectrum,
    TuningCalibration,
};
use cqed_core::trajectory::{simulate_stream, ChannelSet, ClickChannel, ClickStream};
use cqed_core::units::constants::HC_UEV_NM;
use cqed_core::Temperature;

mod demo;

#[derive(Parser)]
#[command(name = "cqed", version, about = "Quantum dot–microcavity simulation and photon-statistics analysis")]
struct Cli {
    /// Random seed; overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normal modes, splitting and figures of merit of a device.
    Eigen { config: PathBuf },
    /// Model anticrossing versus temperature, written to sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value_t = 6.0)]
        t_min: f64,
        #[arg(long, default_value_t = 20.0)]
        t_max: f64,
        #[arg(long, default_value_t = 0.25)]
        t_step: f64,
        #[arg(long, value_enum, default_value_t = Tuning::Resonant)]
        tuning: Tuning,
    },
    /// Simulates a click stream.
    Simulate {
        config: PathBuf,
        /// Acquisition time in ps (default: analysis.duration_ps).
        #[arg(long)]
        duration_ps: Option<f64>,
        #[arg(long, default_value = "clicks.csv")]
        output: String,
    },
    /// Correlation histogram and g²(0) of one or two click streams.
    Correlate {
        #[arg(required = true, num_args = 1..=2)]
        streams: Vec<PathBuf>,
        /// One channel set for autocorrelation (`C`, `C+X`), two for
        /// cross-correlation (`X,C`).
        #[arg(long, default_value = "C")]
        channels: String,
        #[arg(long, default_value_t = hbt::DEFAULT_BIN_PS)]
        bin: f64,
        /// Half window, ps (default: 13 repetition periods, or 10 ns CW).
        #[arg(long)]
        window: Option<f64>,
        /// Repetition period for the pulsed estimator; CW estimator if absent.
        #[arg(long)]
        rep_period: Option<f64>,
        #[arg(long, default_value_t = 10)]
        side_peaks: usize,
        #[arg(long)]
        dark_subtract: bool,
        #[arg(long, default_value = "histogram.csv")]
        output: String,
    },
    /// Double-Lorentzian fits; five or more spectra also give the coupling.
    Fit {
        #[arg(required = true)]
        spectra: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Global)]
        method: Method,
    },
    /// End-to-end reproduction table on the bundled device configuration.
    DemoPaper {
        /// Alternative configuration document.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Tuning {
    Resonant,
    AboveBand,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Global,
    MinSeparation,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Runs a command and returns its stdout report. Files are written only
/// after every stage has succeeded.
fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Eigen { config } => cmd_eigen(&load_config(config)?),
        Command::Sweep { config, t_min, t_max, t_step, tuning } => {
            let cfg = load_config(config)?;
            let calib = match tuning {
                Tuning::Resonant => TuningCalibration::resonant_pump(),
                Tuning::AboveBand => TuningCalibration::above_band_pump(),
            };
            let csv = cmd_sweep(&cfg, &calib, *t_min, *t_max, *t_step)?;
            let path = write_output(&cli.out_dir, "sweep.csv", csv.as_bytes())?;
            Ok(format!("output={}\nconfighash={}\n", path.display(), cfg.hash()))
        }
        Command::Simulate { config, duration_ps, output } => {
            let cfg = load_config(config)?;
            let seed = cli.seed.unwrap_or(cfg.seed);
            let stream = cmd_simulate(&cfg, duration_ps.unwrap_or(cfg.analysis.duration_ps), seed)?;
            let mut buf = Vec::new();
            stream.write_to(&mut buf)?;
            let path = write_output(&cli.out_dir, output, &buf)?;
            let mut s = format!("output={}\nseed={seed}\nconfighash={}\n", path.display(), stream.config_hash);
            for r in cqed_core::trajectory::channel_rates(&stream)? {
                let _ = writeln!(s, "rate_{}_per_ps={:.6e}", r.channel, r.rate);
                let _ = writeln!(s, "rate_{}_err_per_ps={:.6e}", r.channel, r.error);
            }
            Ok(s)
        }
        Command::Correlate { streams, channels, bin, window, rep_period, side_peaks, dark_subtract, output } => {
            let loaded = streams.iter().map(|p| read_stream(p)).collect::<Result<Vec<_>>>()?;
            let req = CorrelateRequest {
                channels,
                bin: *bin,
                window: *window,
                rep_period: *rep_period,
                side_peaks: *side_peaks,
                dark_subtract: *dark_subtract,
            };
            let (csv, report) = cmd_correlate(&loaded, &req)?;
            let path = write_output(&cli.out_dir, output, csv.as_bytes())?;
            Ok(format!("output={}\n{report}", path.display()))
        }
        Command::Fit { spectra, method } => {
            let loaded = spectra
                .iter()
                .map(|p| Spectrum::read_csv(BufReader::new(open(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let method = match method {
                Method::Global => ExtractionMethod::GlobalFit,
                Method::MinSeparation => ExtractionMethod::MinimumSeparation,
            };
            cmd_fit(&loaded, method)
        }
        Command::DemoPaper { config } => {
            let cfg = match config {
                Some(p) => load_config(p)?,
                None => demo::bundled_config()?,
            };
            let seed = cli.seed.unwrap_or(cfg.seed);
            demo::run(&cfg, seed)
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    RunConfig::from_json(&text)
}

fn read_stream(path: &Path) -> Result<ClickStream> {
    ClickStream::read_from(BufReader::new(open(path)?))
}

fn write_output(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(path)
}

fn cmd_eigen(cfg: &RunConfig) -> Result<String> {
    let p = cfg.device.params()?;
    let pair = eigen_energies(&p);
    let fom = figures_of_merit(p.coupling, p.gamma_c, p.gamma_x)?;
    let mut s = String::new();
    let _ = writeln!(s, "detuning_ueV={:.6}", p.detuning().uev());
    for (name, m) in [("upper", &pair.upper), ("lower", &pair.lower)] {
        let _ = writeln!(s, "{name}_energy_ueV={:.6}", m.energy.re);
        let _ = writeln!(s, "{name}_fwhm_ueV={:.6}", m.fwhm().uev());
        let _ = writeln!(s, "{name}_exciton_weight={:.6}", m.exciton_weight());
    }
    let _ = writeln!(s, "splitting_ueV={:.6}", pair.splitting().uev());
    let _ = writeln!(s, "vacuum_rabi_splitting_ueV={:.6}", fom.rabi_splitting.uev());
    let _ = writeln!(s, "regime={}", if fom.strongly_coupled { "strong coupling" } else { "weak coupling" });
    let _ = writeln!(s, "g_over_gamma_c={:.6}", p.coupling.uev() / p.gamma_c.uev());
    let _ = writeln!(s, "purcell_factor={:.6}", fom.purcell);
    let _ = writeln!(s, "quantum_efficiency={:.6}", fom.efficiency);
    let _ = writeln!(s, "confighash={}", cfg.hash());
    Ok(s)
}

/// Temperature grid `t_min, t_min + step, ...` up to `t_max` inclusive.
fn temperature_grid(t_min: f64, t_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && t_max >= t_min && t_min.is_finite() && t_max.is_finite()) {
        return Err(Error::InvalidInput("temperature range needs t_max >= t_min and t_step > 0".into()));
    }
    let n = ((t_max - t_min) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| t_min + i as f64 * step).collect())
}

fn cmd_sweep(cfg: &RunConfig, calib: &TuningCalibration, t_min: f64, t_max: f64, step: f64) -> Result<String> {
    let p = cfg.device.params()?;
    let mut csv = format!("# seed={} confighash={}\n", cfg.seed, cfg.hash());
    csv.push_str("T_K,lambda_upper_nm,lambda_lower_nm,fwhm_upper_ueV,fwhm_lower_ueV\n");
    for t in temperature_grid(t_min, t_max, step)? {
        let at = params_at_temperature(Temperature::from_kelvin(t)?, calib, p.gamma_x, p.gamma_c, p.coupling)?;
        let pair = eigen_energies(&at);
        let _ = writeln!(
            csv,
            "{t},{},{},{},{}",
            HC_UEV_NM / pair.upper.energy.re,
            HC_UEV_NM / pair.lower.energy.re,
            pair.upper.fwhm().uev(),
            pair.lower.fwhm().uev()
        );
    }
    Ok(csv)
}

fn cmd_simulate(cfg: &RunConfig, duration_ps: f64, seed: u64) -> Result<ClickStream> {
    simulate_stream(&cfg.device.model()?, &cfg.pump, &cfg.detectors, duration_ps, seed)
}

struct CorrelateRequest<'a> {
    channels: &'a str,
    bin: f64,
    window: Option<f64>,
    rep_period: Option<f64>,
    side_peaks: usize,
    dark_subtract: bool,
}

fn cmd_correlate(streams: &[ClickStream], req: &CorrelateRequest) -> Result<(String, String)> {
    let sets = req.channels.split(',').map(str::parse).collect::<Result<Vec<ChannelSet>>>()?;
    let window = match (req.window, req.rep_period) {
        (Some(w), _) => w,
        (None, Some(rep)) => hbt::DEFAULT_WINDOW_PERIODS.max(req.side_peaks as f64 + 0.5) * rep,
        (None, None) => 10_000.0,
    };
    let first = &streams[0];
    let h = match (streams, sets.as_slice()) {
        ([s], [a]) => {
            let h = correlate_stream(s, *a, None, window, req.bin)?;
            if req.dark_subtract { subtract_stream_darks(&h, s, *a, None)? } else { h }
        }
        ([s], [a, b]) => {
            let h = correlate_stream(s, *a, Some(*b), window, req.bin)?;
            if req.dark_subtract { subtract_stream_darks(&h, s, *a, Some(*b))? } else { h }
        }
        ([sa, sb], [a, b]) => {
            if sa.duration_ps != sb.duration_ps {
                return Err(Error::InvalidInput("streams of a cross-correlation must share one acquisition".into()));
            }
            let h = correlate(&sa.times(*a), &sb.times(*b), window, req.bin, sa.duration_ps)?;
            if req.dark_subtract {
                let dark = |s: &ClickStream, set: ChannelSet| {
                    if set.includes_dark() { s.count(ClickChannel::D) as f64 / s.duration_ps } else { 0.0 }
                };
                subtract_dark_counts(&h, dark(sa, *a), dark(sb, *b), h.rate_a(), h.rate_b())?
            } else {
                h
            }
        }
        _ => {
            return Err(Error::InvalidInput(
                "give one channel set (autocorrelation) or two (`A,B`); two files need two channel sets".into(),
            ))
        }
    };
    let g2: G2Estimate = match req.rep_period {
        Some(rep) if h.auto => hbt::pulsed_g2_zero(&h, rep, req.side_peaks)?,
        Some(rep) => hbt::cross_g2_zero(&h, rep, req.side_peaks)?,
        None => hbt::cw_g2_zero(&h)?,
    };
    let hashes: Vec<&str> = streams.iter().map(|s| s.config_hash.as_str()).collect();
    let mut csv = format!("# seed={} confighash={}\n", first.seed, hashes.join("+"));
    let mut body = Vec::new();
    h.write_csv(&mut body)?;
    csv.push_str(&String::from_utf8_lossy(&body));
    let mut report = format!("channels={}\nseed={}\n", req.channels, first.seed);
    report.push_str(&g2.report(&hashes.join("+")));
    Ok((csv, report))
}

fn cmd_fit(spectra: &[Spectrum], method: ExtractionMethod) -> Result<String> {
    let fits = spectra.iter().map(fit_spectrum).collect::<Result<Vec<_>>>()?;
    let mut s = String::new();
    for (i, f) in fits.iter().enumerate() {
        let _ = writeln!(s, "[spectrum {}]", i + 1);
        s.push_str(&f.report());
    }
    if spectra.len() >= cqed_core::spectral::MIN_SERIES_POINTS {
        let usable: Vec<_> = fits.into_iter().filter(|f| f.converged).collect();
        let curve = assemble_anticrossing(&usable)?;
        let x = extract_coupling(&curve, method)?;
        let _ = writeln!(s, "[coupling]");
        s.push_str(&x.report());
    }
    let text: Vec<String> = spectra.iter().map(|sp| format!("{:?}", (&sp.wavelength, &sp.intensity))).collect();
    let _ = writeln!(s, "inputhash={}", config_hash(&text));
    Ok(s)
}
