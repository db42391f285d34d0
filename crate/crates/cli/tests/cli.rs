use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cqed_core::config::{AnalysisConfig, RunConfig};
use cqed_core::coupled::eigen_energies;
use cqed_core::scenarios::Calibration;
use cqed_core::spectral::{params_at_temperature, synthetic_series, SeriesSpec, TuningCalibration};
use cqed_core::trajectory::{DetectorModel, PumpSchedule};
use cqed_core::units::constants::HC_UEV_NM;
use cqed_core::units::{Energy, Temperature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const BUNDLED: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/pillar2.json");

fn cqed(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cqed")).arg("--out-dir").arg(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> HashMap<String, String> {
    let out = cqed(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn num(kv: &HashMap<String, String>, key: &str) -> f64 {
    kv[key].parse().unwrap_or_else(|_| panic!("{key}={}", kv[key]))
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn bundled() -> RunConfig {
    RunConfig::from_json(&fs::read_to_string(BUNDLED).unwrap()).unwrap()
}

#[test]
fn bundled_config_is_the_calibrated_resonant_scenario() {
    let expected = Calibration::default().resonant().unwrap().run_config(DetectorModel::ideal(), AnalysisConfig::default(), 1);
    assert_eq!(bundled(), expected);
}

#[test]
fn eigen_reports_the_reference_device() {
    let dir = TempDir::new().unwrap();
    let kv = ok(dir.path(), &["eigen", BUNDLED]);
    assert!((num(&kv, "vacuum_rabi_splitting_ueV") - 55.98).abs() < 0.01);
    assert!((num(&kv, "purcell_factor") - 61.31).abs() < 0.01);
    assert!((num(&kv, "quantum_efficiency") - 0.973).abs() < 0.001);
    assert_eq!(kv["regime"], "strong coupling");
    assert_eq!(kv["confighash"], bundled().hash());
}

#[test]
fn uncoupled_device_is_weakly_coupled() {
    let dir = TempDir::new().unwrap();
    let mut cfg = bundled();
    cfg.device.g_uev = 0.0;
    let path = write_config(dir.path(), "g0.json", &cfg);
    let kv = ok(dir.path(), &["eigen", path.to_str().unwrap()]);
    assert_eq!(kv["regime"], "weak coupling");
    assert_eq!(num(&kv, "purcell_factor"), 0.0);
    assert_eq!(num(&kv, "splitting_ueV"), 0.0);
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"device": {"exciton_uev": 1.0}}"#).unwrap();
    let out = cqed(dir.path(), &["eigen", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());

    let mut v = serde_json::to_value(bundled()).unwrap();
    v["detectors"]["efficency"] = serde_json::json!(0.5);
    fs::write(&path, v.to_string()).unwrap();
    let out = cqed(dir.path(), &["simulate", path.to_str().unwrap(), "--duration-ps", "1e6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("detectors"));
    assert!(!dir.path().join("clicks.csv").exists());
}

#[test]
fn sweep_rows_match_direct_evaluation() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["sweep", BUNDLED]);
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let cfg = bundled();
    let p = cfg.device.params().unwrap();
    let calib = TuningCalibration::resonant_pump();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("# seed=1 confighash={}", cfg.hash()));
    assert_eq!(lines.next().unwrap(), "T_K,lambda_upper_nm,lambda_lower_nm,fwhm_upper_ueV,fwhm_lower_ueV");
    let mut best = (f64::INFINITY, 0.0);
    let mut rows = 0;
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let at = params_at_temperature(
            Temperature::from_kelvin(f[0]).unwrap(),
            &calib,
            p.gamma_x,
            p.gamma_c,
            p.coupling,
        )
        .unwrap();
        let pair = eigen_energies(&at);
        assert_eq!(f[1], HC_UEV_NM / pair.upper.energy.re);
        assert_eq!(f[2], HC_UEV_NM / pair.lower.energy.re);
        assert_eq!(f[3], pair.upper.fwhm().uev());
        assert_eq!(f[4], pair.lower.fwhm().uev());
        let gap = (f[2] - f[1]).abs();
        if gap < best.0 {
            best = (gap, f[0]);
        }
        rows += 1;
    }
    assert_eq!(rows, 57);
    assert_eq!(best.1, 10.5);

    let out = cqed(dir.path(), &["sweep", BUNDLED, "--t-min", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let mut args = vec!["simulate", BUNDLED, "--duration-ps", "5e7", "--output", name];
        args.extend_from_slice(extra);
        ok(dir.path(), &args);
        fs::read(dir.path().join(name)).unwrap()
    };
    let a = run("a.csv", &[]);
    assert_eq!(a, run("b.csv", &["--threads", "2"]));
    assert_ne!(a, run("c.csv", &["--seed", "2"]));
}

fn poisson_stream(dir: &Path, rate: f64, duration: f64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut text = format!("#cqed-click-v1 seed=99 duration_ps={duration} confighash=poisson\nchannel,time_ps\n");
    let mut t = 0.0;
    loop {
        t += -rng.random::<f64>().ln() / rate;
        if t >= duration {
            break;
        }
        text.push_str(&format!("C,{t:.1}\n"));
    }
    let path = dir.join("poisson.csv");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn correlate_poisson_stream_is_flat() {
    let dir = TempDir::new().unwrap();
    let path = poisson_stream(dir.path(), 1e-3, 1e8);
    let kv = ok(dir.path(), &["correlate", path.to_str().unwrap(), "--window", "5000"]);
    assert_eq!(kv["method"], "cw_normalized");
    assert!((num(&kv, "value") - 1.0).abs() <= 3.0 * num(&kv, "error"));
    let hist = fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert!(hist.starts_with("# seed=99 confighash=poisson\n"));
}

#[test]
fn correlate_ideal_single_photons_gives_zero() {
    let dir = TempDir::new().unwrap();
    let mut cfg = bundled();
    cfg.device.cavity_feed_per_ps = 0.0;
    cfg.pump = PumpSchedule::pulsed(13_000.0, 1.0);
    let path = write_config(dir.path(), "ideal.json", &cfg);
    ok(dir.path(), &["simulate", path.to_str().unwrap(), "--duration-ps", "1.3e8"]);
    let clicks = dir.path().join("clicks.csv");
    let kv = ok(dir.path(), &["correlate", clicks.to_str().unwrap(), "--channels", "C+X", "--rep-period", "13000"]);
    assert_eq!(kv["method"], "pulsed_peak_area");
    assert_eq!(num(&kv, "value"), 0.0);
}

#[test]
fn correlate_empty_stream_exits_4() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("empty.csv");
    fs::write(&path, "#cqed-click-v1 seed=1 duration_ps=1000000 confighash=x\nchannel,time_ps\n").unwrap();
    let out = cqed(dir.path(), &["correlate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(out.stdout.is_empty());
    assert!(!dir.path().join("histogram.csv").exists());
}

#[test]
fn fit_recovers_the_coupling_from_spectra_files() {
    let dir = TempDir::new().unwrap();
    let spec = SeriesSpec::pillar(Energy::from_uev(0.94), Energy::from_uev(85.0), Energy::from_uev(35.0));
    let series = synthetic_series(&spec, 5).unwrap();
    let mut args = vec!["fit".to_string()];
    for (i, s) in series.iter().enumerate() {
        let path = dir.path().join(format!("s{i:02}.csv"));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        fs::write(&path, buf).unwrap();
        args.push(path.to_str().unwrap().to_string());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let kv = ok(dir.path(), &args);
    assert_eq!(kv["regime"], "strong");
    assert!((num(&kv, "g_ueV") / 35.0 - 1.0).abs() < 0.05, "{}", kv["g_ueV"]);
    assert!((num(&kv, "gamma_c_ueV") / 85.0 - 1.0).abs() < 0.05, "{}", kv["gamma_c_ueV"]);
}

#[test]
fn demo_table_passes_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let first = cqed(dir.path(), &["demo-paper"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let text = String::from_utf8(first.stdout.clone()).unwrap();
    let passed = text.lines().find_map(|l| l.strip_prefix("passed=")).unwrap();
    let (n, m) = passed.split_once('/').unwrap();
    assert_eq!(n, m, "{text}");
    assert_eq!(cqed(dir.path(), &["demo-paper"]).stdout, first.stdout);
}
