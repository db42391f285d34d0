//! Double-Lorentzian spectral fitting and coupling extraction from a
//! temperature-tuned anticrossing.
//!
//! Spectrum samples are pixel averages: each sample carries the mean spectral
//! density over its pixel, whose edges are the midpoints between neighboring
//! sample wavelengths. The line model is integrated over each pixel
//! analytically, so lines narrower than a pixel are still described exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupled::{model_lineshape, InitialExcitation, SystemParams};
use crate::error::{Error, Result};
use crate::lm::{minimize, LeastSquares, LmConfig};
use crate::units::{constants::HC_UEV_NM, wavelength_to_energy, Energy, Temperature, Wavelength};

/// Minimum samples per linewidth for a well-sampled fit.
pub const MIN_POINTS_PER_LINEWIDTH: f64 = 8.0;
/// Minimum temperatures in an anticrossing series.
pub const MIN_SERIES_POINTS: usize = 5;
/// A series point is rejected when the norm of its whitened residual
/// exceeds this.
pub const OUTLIER_SIGMA: f64 = 5.0;
const OUTLIER_ROUNDS: usize = 5;

const N_PARAMS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub wavelength: Vec<f64>,
    pub intensity: Vec<f64>,
    pub temperature: Option<Temperature>,
}

impl Spectrum {
    pub fn new(wavelength: Vec<f64>, intensity: Vec<f64>, temperature: Option<Temperature>) -> Result<Self> {
        if wavelength.len() != intensity.len() {
            return Err(Error::invalid("wavelength and intensity lengths differ"));
        }
        if wavelength.len() < N_PARAMS + 1 {
            return Err(Error::invalid(format!("spectrum needs at least {} samples", N_PARAMS + 1)));
        }
        if wavelength.iter().any(|w| !(w.is_finite() && *w > 0.0)) || wavelength.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("wavelengths must be positive and strictly increasing"));
        }
        if intensity.iter().any(|y| !(y.is_finite() && *y >= 0.0)) {
            return Err(Error::invalid("intensities must be finite and >= 0"));
        }
        Ok(Spectrum { wavelength, intensity, temperature })
    }

    pub fn len(&self) -> usize {
        self.wavelength.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelength.is_empty()
    }

    /// Pixel edges, one more than the number of samples.
    pub fn edges(&self) -> Vec<f64> {
        let w = &self.wavelength;
        let n = w.len();
        let mut e = Vec::with_capacity(n + 1);
        e.push(w[0] - 0.5 * (w[1] - w[0]));
        e.extend(w.windows(2).map(|p| 0.5 * (p[0] + p[1])));
        e.push(w[n - 1] + 0.5 * (w[n - 1] - w[n - 2]));
        e
    }

    /// Median sample spacing in nm.
    pub fn pitch(&self) -> f64 {
        let mut d: Vec<f64> = self.wavelength.windows(2).map(|p| p[1] - p[0]).collect();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    }

    pub fn scaled(&self, factor: f64) -> Spectrum {
        Spectrum {
            wavelength: self.wavelength.clone(),
            intensity: self.intensity.iter().map(|y| y * factor).collect(),
            temperature: self.temperature,
        }
    }

    /// Reads `wavelength_nm,intensity` CSV with an optional
    /// `# temperature_K=<f>` comment.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let (mut wl, mut y, mut temp) = (Vec::new(), Vec::new(), None);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("temperature_K=") {
                    let t: f64 = v.trim().parse().map_err(|_| perr(format!("bad temperature `{v}`")))?;
                    temp = Some(Temperature::from_kelvin(t)?);
                }
                continue;
            }
            if line.is_empty() || line.starts_with("wavelength_nm") {
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| perr(format!("expected two columns, got `{line}`")))?;
            wl.push(a.trim().parse().map_err(|_| perr(format!("bad wavelength `{a}`")))?);
            y.push(b.trim().parse().map_err(|_| perr(format!("bad intensity `{b}`")))?);
        }
        Spectrum::new(wl, y, temp)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if let Some(t) = self.temperature {
            writeln!(w, "# temperature_K={}", t.kelvin())?;
        }
        writeln!(w, "wavelength_nm,intensity")?;
        for (l, y) in self.wavelength.iter().zip(&self.intensity) {
            writeln!(w, "{l},{y}")?;
        }
        Ok(())
    }
}

/// A Lorentzian line in wavelength space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianParams {
    pub center: f64,
    pub fwhm: f64,
    pub area: f64,
}

impl LorentzianParams {
    pub fn density(&self, lambda: f64) -> f64 {
        let s = 0.5 * self.fwhm;
        self.area / std::f64::consts::PI * s / ((lambda - self.center).powi(2) + s * s)
    }
}

/// `atan(a) - atan(b)` without cancellation in the tails.
fn atan_diff(a: f64, b: f64) -> f64 {
    (a - b).atan2(1.0 + a * b)
}

/// Mean density of a Lorentzian over `[lo, hi]`.
pub fn pixel_lorentzian(lo: f64, hi: f64, line: &LorentzianParams) -> f64 {
    let s = 0.5 * line.fwhm.abs();
    line.area / (std::f64::consts::PI * (hi - lo)) * atan_diff((hi - line.center) / s, (lo - line.center) / s)
}

/// Two pixel-integrated Lorentzians on a constant baseline. Parameter order
/// `[c1, w1, A1, c2, w2, A2, B]`.
pub struct DoubleLorentzian<'a> {
    lo: Vec<f64>,
    hi: Vec<f64>,
    data: &'a [f64],
    weights: Vec<f64>,
}

impl<'a> DoubleLorentzian<'a> {
    pub fn new(s: &'a Spectrum) -> Self {
        let e = s.edges();
        DoubleLorentzian { lo: e[..e.len() - 1].to_vec(), hi: e[1..].to_vec(), data: &s.intensity, weights: vec![1.0; s.len()] }
    }

    /// Residuals are multiplied by `weights` (inverse noise amplitudes).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.lo.len());
        self.weights = weights;
        self
    }

    pub fn model(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.lo.len(), |i, _| {
            let (lo, hi) = (self.lo[i], self.hi[i]);
            x[6] + pixel_lorentzian(lo, hi, &line(x, 0)) + pixel_lorentzian(lo, hi, &line(x, 1))
        })
    }

    /// Derivatives of the model, rows per sample.
    pub fn model_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.lo.len(), N_PARAMS);
        for i in 0..self.lo.len() {
            let (lo, hi) = (self.lo[i], self.hi[i]);
            let h = hi - lo;
            for k in 0..2 {
                let (c, w, area) = (x[3 * k], x[3 * k + 1], x[3 * k + 2]);
                let s = 0.5 * w.abs();
                let a = (hi - c) / s;
                let b = (lo - c) / s;
                let pref = 1.0 / (std::f64::consts::PI * h);
                let da = 1.0 / (1.0 + a * a);
                let db = 1.0 / (1.0 + b * b);
                j[(i, 3 * k)] = area * pref * (-da + db) / s;
                j[(i, 3 * k + 1)] = area * pref * (-a * da + b * db) / s * 0.5 * w.signum();
                j[(i, 3 * k + 2)] = pref * atan_diff(a, b);
            }
            j[(i, 6)] = 1.0;
        }
        j
    }
}

fn line(x: &DVector<f64>, k: usize) -> LorentzianParams {
    LorentzianParams { center: x[3 * k], fwhm: x[3 * k + 1], area: x[3 * k + 2] }
}

impl LeastSquares for DoubleLorentzian<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut m = self.model(x);
        for ((mi, y), w) in m.iter_mut().zip(self.data).zip(&self.weights) {
            *mi = (*mi - y) * w;
        }
        m
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.model_jacobian(x);
        for (mut row, w) in j.row_iter_mut().zip(&self.weights) {
            row *= *w;
        }
        j
    }
}

/// Starting point for [`fit_double_lorentzian`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSeed {
    pub lines: [LorentzianParams; 2],
    pub baseline: f64,
}

impl FitSeed {
    fn to_vector(self) -> DVector<f64> {
        let [a, b] = self.lines;
        DVector::from_vec(vec![a.center, a.fwhm, a.area, b.center, b.fwhm, b.area, self.baseline])
    }
}

fn percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[((s.len() - 1) as f64 * q).round() as usize]
}

/// Local maxima of `y` with their topographic prominence.
fn prominent_maxima(y: &[f64]) -> Vec<(usize, f64)> {
    let n = y.len();
    let mut out = Vec::new();
    for i in 0..n {
        let left_ok = i == 0 || y[i] > y[i - 1];
        let right_ok = i == n - 1 || y[i] >= y[i + 1];
        if !(left_ok && right_ok) {
            continue;
        }
        let mut lmin = y[i];
        let mut j = i;
        while j > 0 && y[j - 1] <= y[i] {
            j -= 1;
            lmin = lmin.min(y[j]);
        }
        let mut rmin = y[i];
        let mut k = i;
        while k + 1 < n && y[k + 1] <= y[i] {
            k += 1;
            rmin = rmin.min(y[k]);
        }
        // A side that runs into the spectrum edge without meeting a higher
        // point does not limit the prominence.
        let lref = if j == 0 && y[0] <= y[i] { f64::NEG_INFINITY } else { lmin };
        let rref = if k == n - 1 && y[n - 1] <= y[i] { f64::NEG_INFINITY } else { rmin };
        let base = match (lref.is_finite(), rref.is_finite()) {
            (true, true) => lref.max(rref),
            (true, false) => lref,
            (false, true) => rref,
            (false, false) => lmin.min(rmin),
        };
        out.push((i, y[i] - base));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

fn smooth(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| {
            let a = y[i.saturating_sub(1)];
            let c = y[(i + 1).min(n - 1)];
            0.25 * a + 0.5 * y[i] + 0.25 * c
        })
        .collect()
}

/// Full width at half maximum around sample `i` from linear interpolation of
/// the half-maximum crossings, at least one pixel.
fn half_max_width(x: &[f64], y: &[f64], i: usize, base: f64) -> f64 {
    let half = base + 0.5 * (y[i] - base);
    let mut l = i;
    while l > 0 && y[l] > half {
        l -= 1;
    }
    let mut r = i;
    while r + 1 < y.len() && y[r] > half {
        r += 1;
    }
    let cross = |a: usize, b: usize| {
        if y[a] == y[b] {
            x[a]
        } else {
            x[a] + (half - y[a]) / (y[b] - y[a]) * (x[b] - x[a])
        }
    };
    let xl = if l < i && y[l] <= half { cross(l, l + 1) } else { x[l] };
    let xr = if r > i && y[r] <= half { cross(r - 1, r) } else { x[r] };
    let pitch = if y.len() > 1 { (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64 } else { 1.0 };
    (xr - xl).max(pitch)
}

/// Seeds two lines at the two most prominent maxima of the (lightly
/// smoothed) spectrum. With only one maximum the line is split into two
/// seeds one FWHM apart.
pub fn initial_guess(s: &Spectrum) -> Result<FitSeed> {
    let x = &s.wavelength;
    let y = &s.intensity;
    let baseline = percentile(y, 0.05);
    let top = y.iter().cloned().fold(f64::MIN, f64::max);
    if !(top - baseline > 0.0) {
        return Err(Error::stats("flat spectrum: no signal to fit"));
    }
    let threshold = 0.05 * (top - baseline);
    let smoothed = smooth(y);
    let mut peaks: Vec<(usize, f64)> = prominent_maxima(&smoothed).into_iter().filter(|p| p.1 >= threshold).collect();
    if peaks.len() < 2 {
        let raw: Vec<(usize, f64)> = prominent_maxima(y).into_iter().filter(|p| p.1 >= threshold).collect();
        if raw.len() > peaks.len() {
            peaks = raw;
        }
    }
    let seed_line = |i: usize| {
        let w = half_max_width(x, y, i, baseline);
        let c = refine_center(x, y, i);
        let height = (y[i] - baseline).max(0.0);
        LorentzianParams { center: c, fwhm: w, area: 0.5 * std::f64::consts::PI * height * w }
    };
    match peaks.as_slice() {
        [] => Err(Error::stats("no local maximum above the noise")),
        [(i, _)] => Ok(split_seed(seed_line(*i), baseline)),
        [(i, _), (j, _), ..] => {
            let (a, b) = (seed_line(*i.min(j)), seed_line(*i.max(j)));
            // Half-maximum widths of blended peaks overlap; cap at the gap.
            let gap = b.center - a.center;
            let cap = |l: LorentzianParams| LorentzianParams { fwhm: l.fwhm.min(gap.max(f64::EPSILON)), ..l };
            let (a, b) = (cap(a), cap(b));
            let fix_area = |l: LorentzianParams, i: usize| LorentzianParams {
                area: 0.5 * std::f64::consts::PI * (y[i] - baseline).max(0.0) * l.fwhm,
                ..l
            };
            Ok(FitSeed { lines: [fix_area(a, *i.min(j)), fix_area(b, *i.max(j))], baseline })
        }
    }
}

fn split_seed(l: LorentzianParams, baseline: f64) -> FitSeed {
    let half = LorentzianParams { center: l.center, fwhm: l.fwhm, area: 0.5 * l.area };
    FitSeed {
        lines: [
            LorentzianParams { center: l.center - 0.5 * l.fwhm, ..half },
            LorentzianParams { center: l.center + 0.5 * l.fwhm, ..half },
        ],
        baseline,
    }
}

/// Parabolic refinement of a maximum position.
fn refine_center(x: &[f64], y: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= x.len() {
        return x[i];
    }
    let (a, b, c) = (y[i - 1], y[i], y[i + 1]);
    let den = a - 2.0 * b + c;
    if den >= 0.0 {
        return x[i];
    }
    let off = (0.5 * (a - c) / den).clamp(-0.5, 0.5);
    x[i] + off * 0.5 * (x[i + 1] - x[i - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Ordered by increasing center wavelength.
    pub lines: [LorentzianParams; 2],
    pub baseline: f64,
    /// Covariance of `[c1, w1, A1, c2, w2, A2, B]`.
    pub covariance: Vec<Vec<f64>>,
    /// Weighted residual variance per degree of freedom; relative units
    /// under proportional noise.
    pub reduced_chi2: f64,
    /// Unweighted `½‖r‖²`, comparable between fits of the same spectrum.
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Fewer than [`MIN_POINTS_PER_LINEWIDTH`] samples across a line.
    pub undersampled: bool,
    pub temperature: Option<Temperature>,
    /// Residual weights of the final pass.
    pub weights: Vec<f64>,
}

impl FitResult {
    pub fn std_err(&self, k: usize) -> f64 {
        self.covariance[k][k].max(0.0).sqrt()
    }

    pub fn params(&self) -> DVector<f64> {
        let [a, b] = self.lines;
        DVector::from_vec(vec![a.center, a.fwhm, a.area, b.center, b.fwhm, b.area, self.baseline])
    }

    /// Flat key-value report.
    pub fn report(&self) -> String {
        let mut s = String::new();
        if let Some(t) = self.temperature {
            let _ = writeln!(s, "temperature_K={}", t.kelvin());
        }
        for (k, l) in self.lines.iter().enumerate() {
            let _ = writeln!(s, "line{}_center_nm={:.6}", k + 1, l.center);
            let _ = writeln!(s, "line{}_center_err_nm={:.6}", k + 1, self.std_err(3 * k));
            let _ = writeln!(s, "line{}_fwhm_nm={:.6}", k + 1, l.fwhm);
            let _ = writeln!(s, "line{}_fwhm_err_nm={:.6}", k + 1, self.std_err(3 * k + 1));
            let _ = writeln!(s, "line{}_area={:.6e}", k + 1, l.area);
        }
        let _ = writeln!(s, "baseline={:.6e}", self.baseline);
        let _ = writeln!(s, "reduced_chi2={:.6e}", self.reduced_chi2);
        let _ = writeln!(s, "converged={}", self.converged);
        let _ = writeln!(s, "undersampled={}", self.undersampled);
        s
    }
}

/// Noise model used to weight the spectral residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Equal noise on every sample.
    Uniform,
    /// Noise proportional to the signal, with a floor at `floor` times the
    /// model maximum. Weights come from the model of the previous pass.
    Proportional { floor: f64 },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Proportional { floor: 1e-3 }
    }
}

const REWEIGHT_PASSES: usize = 2;

/// Least-squares fit of two pixel-integrated Lorentzians and a baseline
/// under the default noise model. A fit that does not converge within the
/// iteration limit, or that ends with a nonpositive width or area, a center
/// outside the spectral window or a degenerate covariance, is returned with
/// `converged = false`.
pub fn fit_double_lorentzian(s: &Spectrum, seed: &FitSeed) -> Result<FitResult> {
    fit_double_lorentzian_with(s, seed, NoiseModel::default())
}

pub fn fit_double_lorentzian_with(s: &Spectrum, seed: &FitSeed, noise: NoiseModel) -> Result<FitResult> {
    let x0 = seed.to_vector();
    if x0.iter().any(|v| !v.is_finite()) || seed.lines.iter().any(|l| !(l.fwhm > 0.0)) {
        return Err(Error::invalid("seed widths must be > 0 and parameters finite"));
    }
    // Fit at unit peak intensity so tolerances do not depend on the scale.
    let top = s.intensity.iter().cloned().fold(0.0, f64::max);
    let scale = if top > 0.0 { top } else { 1.0 };
    let unit = s.scaled(1.0 / scale);
    let amplitude = [2usize, 5, 6];
    let mut x0 = x0;
    for &k in &amplitude {
        x0[k] /= scale;
    }
    let cfg = LmConfig::default();
    let plain = DoubleLorentzian::new(&unit);
    let mut res = minimize(&plain, x0, &cfg);
    let mut weights = vec![1.0; s.len()];
    if let NoiseModel::Proportional { floor } = noise {
        if !(floor > 0.0) {
            return Err(Error::invalid("noise floor must be > 0"));
        }
        for _ in 0..REWEIGHT_PASSES {
            let m = plain.model(&res.x);
            let peak = m.amax();
            if !(peak > 0.0 && peak.is_finite()) {
                break;
            }
            weights = m.iter().map(|v| 1.0 / v.abs().max(floor * peak)).collect();
            let weighted = DoubleLorentzian::new(&unit).with_weights(weights.clone());
            res = minimize(&weighted, res.x.clone(), &cfg);
        }
    }
    let unweighted_cost = 0.5 * plain.residuals(&res.x).norm_squared() * scale * scale;
    // A singular normal matrix leaves the fit unconverged with NaN errors.
    let mut cov = res.covariance().unwrap_or_else(|| DMatrix::from_element(N_PARAMS, N_PARAMS, f64::NAN));
    let mut x = res.x.clone();
    x[1] = x[1].abs();
    x[4] = x[4].abs();
    for &k in &amplitude {
        x[k] *= scale;
        cov.row_mut(k).scale_mut(scale);
        cov.column_mut(k).scale_mut(scale);
    }
    if let NoiseModel::Proportional { .. } = noise {
        for w in &mut weights {
            *w /= scale;
        }
    }
    let order: [usize; 2] = if x[0] <= x[3] { [0, 1] } else { [1, 0] };
    let idx: Vec<usize> = order.iter().flat_map(|&k| (3 * k)..(3 * k + 3)).chain(std::iter::once(6)).collect();
    let covariance: Vec<Vec<f64>> = idx.iter().map(|&r| idx.iter().map(|&c| cov[(r, c)]).collect()).collect();
    let lines = [line(&x, order[0]), line(&x, order[1])];
    let edges = s.edges();
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let valid = lines.iter().all(|l| l.fwhm > 0.0 && l.area > 0.0 && (lo..=hi).contains(&l.center)) && positive_definite(&cov);
    let pitch = s.pitch();
    let dof = (s.len() - N_PARAMS) as f64;
    Ok(FitResult {
        lines,
        baseline: x[6],
        covariance,
        reduced_chi2: 2.0 * res.cost / dof,
        cost: unweighted_cost,
        converged: res.converged && valid,
        iterations: res.iterations,
        undersampled: lines.iter().any(|l| l.fwhm / pitch < MIN_POINTS_PER_LINEWIDTH),
        temperature: s.temperature,
        weights,
    })
}

/// Finite, symmetric and well conditioned after scaling to unit diagonal.
fn positive_definite(cov: &DMatrix<f64>) -> bool {
    if cov.iter().any(|v| !v.is_finite()) || (0..cov.nrows()).any(|k| !(cov[(k, k)] > 0.0)) {
        return false;
    }
    let d = cov.diagonal().map(|v| 1.0 / v.sqrt());
    let corr = DMatrix::from_fn(cov.nrows(), cov.ncols(), |r, c| cov[(r, c)] * d[r] * d[c]);
    let ev = corr.symmetric_eigenvalues();
    ev.min() > 1e-10 * ev.max()
}

/// Fits from [`initial_guess`] and from alternative seeds (the dominant
/// peak split in two, and the two seeds with exchanged widths), keeping the
/// converged fit of lowest cost.
pub fn fit_spectrum(s: &Spectrum) -> Result<FitResult> {
    let seed = initial_guess(s)?;
    let [a, b] = seed.lines;
    let dominant = if a.area >= b.area { a } else { b };
    let merged = LorentzianParams { area: a.area + b.area, ..dominant };
    let seeds = [
        seed,
        split_seed(merged, seed.baseline),
        FitSeed { lines: [LorentzianParams { fwhm: b.fwhm, ..a }, LorentzianParams { fwhm: a.fwhm, ..b }], ..seed },
    ];
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for sd in &seeds {
        match fit_double_lorentzian(s, sd) {
            Ok(f) => {
                let better = match &best {
                    None => true,
                    Some(b) => (f.converged && !b.converged) || (f.converged == b.converged && f.cost < b.cost),
                };
                if better {
                    best = Some(f);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::numerical("no fit succeeded")))
}

/// One spectral line converted to energy units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineMeasurement {
    pub wavelength_nm: f64,
    pub energy: f64,
    pub energy_err: f64,
    pub fwhm: f64,
    pub fwhm_err: f64,
}

/// Both lines at one temperature. `upper` has the higher energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredPoint {
    pub temperature: f64,
    pub upper: LineMeasurement,
    pub lower: LineMeasurement,
    /// Covariance of `(E_upper, E_lower, W_upper, W_lower)` in µeV².
    pub covariance: [[f64; 4]; 4],
    /// True when branch 0 of the continued curve is the upper line here.
    pub branch0_is_upper: bool,
}

impl MeasuredPoint {
    /// Builds a point from exact energies and widths with unit covariance.
    pub fn exact(temperature: f64, upper: (f64, f64), lower: (f64, f64)) -> Self {
        let lm = |(e, w): (f64, f64)| LineMeasurement {
            wavelength_nm: HC_UEV_NM / e,
            energy: e,
            energy_err: 1.0,
            fwhm: w,
            fwhm_err: 1.0,
        };
        let mut covariance = [[0.0; 4]; 4];
        for (k, row) in covariance.iter_mut().enumerate() {
            row[k] = 1.0;
        }
        MeasuredPoint { temperature, upper: lm(upper), lower: lm(lower), covariance, branch0_is_upper: true }
    }

    pub fn splitting(&self) -> f64 {
        self.upper.energy - self.lower.energy
    }

    pub fn splitting_err(&self) -> f64 {
        let c = &self.covariance;
        (c[0][0] + c[1][1] - 2.0 * c[0][1]).max(0.0).sqrt()
    }

    /// Branch `k` of the continued curve.
    pub fn branch(&self, k: usize) -> &LineMeasurement {
        if (k == 0) == self.branch0_is_upper {
            &self.upper
        } else {
            &self.lower
        }
    }

    fn from_fit(fit: &FitResult) -> Result<Self> {
        let t = fit
            .temperature
            .ok_or_else(|| Error::invalid("every spectrum in a series needs a temperature"))?
            .kelvin();
        // Shorter wavelength is the upper (higher-energy) line.
        let (c_up, w_up, c_lo, w_lo) = (fit.lines[0].center, fit.lines[0].fwhm, fit.lines[1].center, fit.lines[1].fwhm);
        let p = [c_up, w_up, c_lo, w_lo];
        let idx = [0usize, 1, 3, 4];
        // d(E_u, E_l, W_u, W_l)/d(c_u, w_u, c_l, w_l)
        let mut t_mat = Matrix4::<f64>::zeros();
        t_mat[(0, 0)] = -HC_UEV_NM / (p[0] * p[0]);
        t_mat[(1, 2)] = -HC_UEV_NM / (p[2] * p[2]);
        t_mat[(2, 0)] = -2.0 * p[1] * HC_UEV_NM / p[0].powi(3);
        t_mat[(2, 1)] = HC_UEV_NM / (p[0] * p[0]);
        t_mat[(3, 2)] = -2.0 * p[3] * HC_UEV_NM / p[2].powi(3);
        t_mat[(3, 3)] = HC_UEV_NM / (p[2] * p[2]);
        let cov_nm = Matrix4::from_fn(|r, c| fit.covariance[idx[r]][idx[c]]);
        let cov = t_mat * cov_nm * t_mat.transpose();
        let lm = |c: f64, w: f64, k: usize| LineMeasurement {
            wavelength_nm: c,
            energy: HC_UEV_NM / c,
            energy_err: cov[(k, k)].max(0.0).sqrt(),
            fwhm: w * HC_UEV_NM / (c * c),
            fwhm_err: cov[(k + 2, k + 2)].max(0.0).sqrt(),
        };
        let mut covariance = [[0.0; 4]; 4];
        for (r, row) in covariance.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = cov[(r, c)];
            }
        }
        Ok(MeasuredPoint { temperature: t, upper: lm(c_up, w_up, 0), lower: lm(c_lo, w_lo, 1), covariance, branch0_is_upper: true })
    }
}

/// A measured anticrossing: per-temperature line pairs with branch identity
/// carried across the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredAnticrossing {
    pub points: Vec<MeasuredPoint>,
}

impl MeasuredAnticrossing {
    /// Index of the smallest splitting.
    pub fn min_index(&self) -> usize {
        self.points
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.splitting().total_cmp(&b.1.splitting()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Minimum splitting with parabolic refinement of `S²(T)` around the
    /// smallest sample. Returns `(T, S, σ_S)`.
    pub fn min_splitting(&self) -> (f64, f64, f64) {
        let i = self.min_index();
        let p = &self.points;
        let (t, s, e) = (p[i].temperature, p[i].splitting(), p[i].splitting_err());
        if i == 0 || i + 1 >= p.len() {
            return (t, s, e);
        }
        let xs = [p[i - 1].temperature, t, p[i + 1].temperature];
        let ys = [p[i - 1].splitting().powi(2), s * s, p[i + 1].splitting().powi(2)];
        match parabola_vertex(xs, ys) {
            Some((tv, v)) if v > 0.0 && tv >= xs[0] && tv <= xs[2] => (tv, v.sqrt(), e),
            _ => (t, s, e),
        }
    }
}

fn parabola_vertex(x: [f64; 3], y: [f64; 3]) -> Option<(f64, f64)> {
    let d1 = (y[1] - y[0]) / (x[1] - x[0]);
    let d2 = (y[2] - y[1]) / (x[2] - x[1]);
    let a = (d2 - d1) / (x[2] - x[0]);
    if !(a > 0.0) {
        return None;
    }
    let b = d1 - a * (x[0] + x[1]);
    let c = y[0] - a * x[0] * x[0] - b * x[0];
    let tv = -b / (2.0 * a);
    Some((tv, c - b * b / (4.0 * a)))
}

/// Orders fits by temperature, converts to energies and continues branch
/// identity adiabatically: each new point keeps or swaps the previous
/// labels, whichever better continues both the linearly extrapolated
/// centers and the linewidths. Ties keep energy ordering.
pub fn assemble_anticrossing(fits: &[FitResult]) -> Result<MeasuredAnticrossing> {
    let usable: Vec<&FitResult> = fits.iter().filter(|f| f.converged).collect();
    if usable.len() < MIN_SERIES_POINTS {
        return Err(Error::stats(format!(
            "{} converged fits, need at least {MIN_SERIES_POINTS}",
            usable.len()
        )));
    }
    let mut points = usable.iter().map(|f| MeasuredPoint::from_fit(f)).collect::<Result<Vec<_>>>()?;
    if points.windows(2).any(|w| !(w[1].temperature > w[0].temperature)) {
        return Err(Error::invalid("temperature series must be strictly increasing"));
    }
    for i in 1..points.len() {
        let prev = &points[i - 1];
        let pred = |k: usize| {
            let e1 = prev.branch(k).energy;
            if i >= 2 {
                let pp = &points[i - 2];
                let slope = (e1 - pp.branch(k).energy) / (prev.temperature - pp.temperature);
                e1 + slope * (points[i].temperature - prev.temperature)
            } else {
                e1
            }
        };
        let (p0, p1) = (pred(0), pred(1));
        let (w0, w1) = (prev.branch(0).fwhm, prev.branch(1).fwhm);
        let cur = &points[i];
        let cost = |b0: &LineMeasurement, b1: &LineMeasurement| {
            let scale = 0.5 * (w0 + w1).max(f64::EPSILON);
            ((b0.energy - p0).abs() + (b1.energy - p1).abs()) / scale
                + (b0.fwhm / w0).ln().abs()
                + (b1.fwhm / w1).ln().abs()
        };
        let keep = cost(&cur.upper, &cur.lower);
        let swap = cost(&cur.lower, &cur.upper);
        points[i].branch0_is_upper = keep <= swap;
    }
    Ok(MeasuredAnticrossing { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    /// Weighted fit of the coupled-mode eigenvalues to every measured
    /// center and width.
    GlobalFit,
    /// Minimum center separation plus far-detuned branch widths.
    MinimumSeparation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingExtraction {
    pub gamma_c: Energy,
    pub gamma_c_err: f64,
    pub gamma_x: Energy,
    pub gamma_x_err: f64,
    pub splitting: Energy,
    pub splitting_err: f64,
    /// Present only when the extracted values satisfy strong coupling with
    /// the splitting resolved by at least two standard errors.
    pub g: Option<Energy>,
    pub g_err: f64,
    /// Upper bound on `g` when the splitting is not resolved.
    pub g_upper_bound: Option<Energy>,
    pub resonance_temperature: Option<f64>,
    pub method: ExtractionMethod,
    pub points_used: usize,
}

impl CouplingExtraction {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method={}", match self.method {
            ExtractionMethod::GlobalFit => "global_fit",
            ExtractionMethod::MinimumSeparation => "minimum_separation",
        });
        let _ = writeln!(s, "gamma_c_ueV={:.4}", self.gamma_c.uev());
        let _ = writeln!(s, "gamma_c_err_ueV={:.4}", self.gamma_c_err);
        let _ = writeln!(s, "gamma_x_ueV={:.4}", self.gamma_x.uev());
        let _ = writeln!(s, "gamma_x_err_ueV={:.4}", self.gamma_x_err);
        let _ = writeln!(s, "splitting_ueV={:.4}", self.splitting.uev());
        let _ = writeln!(s, "splitting_err_ueV={:.4}", self.splitting_err);
        match (self.g, self.g_upper_bound) {
            (Some(g), _) => {
                let _ = writeln!(s, "g_ueV={:.4}", g.uev());
                let _ = writeln!(s, "g_err_ueV={:.4}", self.g_err);
                let _ = writeln!(s, "regime=strong");
            }
            (None, Some(b)) => {
                let _ = writeln!(s, "g_upper_bound_ueV={:.4}", b.uev());
                let _ = writeln!(s, "regime=weak_or_unresolved");
            }
            _ => {}
        }
        if let Some(t) = self.resonance_temperature {
            let _ = writeln!(s, "resonance_temperature_K={t:.4}");
        }
        let _ = writeln!(s, "points_used={}", self.points_used);
        s
    }
}

/// Builds the extraction result from (S², γ_c, γ_x) and their covariance.
fn finish(
    g2: f64,
    gc: f64,
    gx: f64,
    cov: [[f64; 3]; 3],
    resonance_temperature: Option<f64>,
    method: ExtractionMethod,
    points_used: usize,
) -> CouplingExtraction {
    // cov is for (g², γ_c, γ_x).
    let u = gc - gx;
    let s2 = 4.0 * g2 - 0.25 * u * u;
    // dS² = 4 dg² - u/2 (dγ_c - dγ_x)
    let ds2 = [4.0, -0.5 * u, 0.5 * u];
    let quad = |d: [f64; 3]| {
        let mut v = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                v += d[r] * cov[r][c] * d[c];
            }
        }
        v.max(0.0)
    };
    let var_s2 = quad(ds2);
    let (splitting, splitting_err) = if s2 > 0.0 {
        let s = s2.sqrt();
        (s, var_s2.sqrt() / (2.0 * s))
    } else {
        (0.0, var_s2.sqrt().sqrt())
    };
    let g = g2.max(0.0).sqrt();
    let g_err = if g > 0.0 { cov[0][0].max(0.0).sqrt() / (2.0 * g) } else { cov[0][0].max(0.0).sqrt().sqrt() };
    let resolved = s2 > 0.0 && splitting > 2.0 * splitting_err;
    let (g_opt, bound) = if resolved {
        (Some(Energy::from_uev(g)), None)
    } else {
        let s_up = splitting + 2.0 * splitting_err;
        (None, Some(Energy::from_uev((0.25 * s_up * s_up + u * u / 16.0).sqrt())))
    };
    CouplingExtraction {
        gamma_c: Energy::from_uev(gc),
        gamma_c_err: cov[1][1].max(0.0).sqrt(),
        gamma_x: Energy::from_uev(gx),
        gamma_x_err: cov[2][2].max(0.0).sqrt(),
        splitting: Energy::from_uev(splitting),
        splitting_err,
        g: g_opt,
        g_err,
        g_upper_bound: bound,
        resonance_temperature,
        method,
        points_used,
    }
}

/// Extracts (γ_c, γ_x, S, g) from a measured anticrossing.
pub fn extract_coupling(curve: &MeasuredAnticrossing, method: ExtractionMethod) -> Result<CouplingExtraction> {
    if curve.points.len() < MIN_SERIES_POINTS {
        return Err(Error::stats(format!("need at least {MIN_SERIES_POINTS} points")));
    }
    let i0 = curve.min_index();
    if i0 == 0 || i0 + 1 == curve.points.len() {
        return Err(Error::invalid("series does not span resonance: smallest splitting at an end point"));
    }
    match method {
        ExtractionMethod::MinimumSeparation => Ok(extract_min_separation(curve)),
        ExtractionMethod::GlobalFit => extract_global(curve),
    }
}

fn extract_min_separation(curve: &MeasuredAnticrossing) -> CouplingExtraction {
    let (t_res, s, s_err) = curve.min_splitting();
    // Medians over the outer eighth of the series on each side.
    let n = curve.points.len();
    let k = (n / 8).max(1);
    let outer: Vec<&MeasuredPoint> = curve.points[..k].iter().chain(&curve.points[n - k..]).collect();
    let (mut wide, mut narrow): (Vec<&LineMeasurement>, Vec<&LineMeasurement>) = (Vec::new(), Vec::new());
    for p in &outer {
        let (w, nr) = if p.upper.fwhm >= p.lower.fwhm { (&p.upper, &p.lower) } else { (&p.lower, &p.upper) };
        wide.push(w);
        narrow.push(nr);
    }
    // Variance of a median of m values: (π/2)·σ²/m.
    let med = |v: &[&LineMeasurement]| {
        let w: Vec<f64> = v.iter().map(|l| l.fwhm).collect();
        let e: Vec<f64> = v.iter().map(|l| l.fwhm_err.powi(2)).collect();
        (percentile(&w, 0.5), std::f64::consts::FRAC_PI_2 * percentile(&e, 0.5) / v.len() as f64)
    };
    let (gc, vc) = med(&wide);
    let (gx, vx) = med(&narrow);
    let u = gc - gx;
    let g2 = 0.25 * s * s + u * u / 16.0;
    // Var(g²) from S and u; assemble as covariance in (g², γ_c, γ_x).
    let var_g2 = (0.5 * s * s_err).powi(2) + (u / 8.0).powi(2) * (vc + vx);
    let cov = [
        [var_g2, u / 8.0 * vc, -u / 8.0 * vx],
        [u / 8.0 * vc, vc, 0.0],
        [-u / 8.0 * vx, 0.0, vx],
    ];
    let mut out = finish(g2, gc, gx, cov, Some(t_res), ExtractionMethod::MinimumSeparation, curve.points.len());
    // Report the directly measured splitting rather than the re-derived one.
    out.splitting = Energy::from_uev(s);
    out.splitting_err = s_err;
    out
}

/// Residuals of the coupled-mode model for the global fit. Parameters are
/// `[g, γ_c, γ_x, Δ_1, Ē_1, …]`; residuals are whitened by each point's
/// measurement covariance.
struct GlobalProblem {
    obs: Vec<Vector4<f64>>,
    whiten: Vec<Matrix4<f64>>,
}

impl GlobalProblem {
    fn predict(x: &DVector<f64>, i: usize) -> (Vector4<f64>, [Vector4<f64>; 5]) {
        let (g, gc, gx, delta, mean) = (x[0], x[1], x[2], x[3 + 2 * i], x[4 + 2 * i]);
        let c = Complex64::new;
        let h = c(0.5 * delta, -0.25 * (gx - gc));
        let mut q = (c(g * g, 0.0) + h * h).sqrt();
        if q.norm() < 1e-300 {
            q = c(1e-300, 0.0);
        }
        let base = c(mean, -0.25 * (gx + gc));
        let ep = base + q;
        let em = base - q;
        let v = |ep: Complex64, em: Complex64| Vector4::new(ep.re, em.re, -2.0 * ep.im, -2.0 * em.im);
        // dE±/dp = dbase/dp ± dq/dp, dq = (g dg + h dh)/q
        let dq = [
            c(g, 0.0) / q,
            h * c(0.0, 0.25) / q,
            h * c(0.0, -0.25) / q,
            h * c(0.5, 0.0) / q,
            c(0.0, 0.0),
        ];
        let dbase = [c(0.0, 0.0), c(0.0, -0.25), c(0.0, -0.25), c(0.0, 0.0), c(1.0, 0.0)];
        let d = [0, 1, 2, 3, 4].map(|k| v(dbase[k] + dq[k], dbase[k] - dq[k]));
        (v(ep, em), d)
    }
}

impl LeastSquares for GlobalProblem {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(4 * self.obs.len());
        for i in 0..self.obs.len() {
            let (p, _) = Self::predict(x, i);
            let w = self.whiten[i] * (p - self.obs[i]);
            r.fixed_rows_mut::<4>(4 * i).copy_from(&w);
        }
        r
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.obs.len();
        let mut j = DMatrix::zeros(4 * n, 3 + 2 * n);
        for i in 0..n {
            let (_, d) = Self::predict(x, i);
            let cols = [0, 1, 2, 3 + 2 * i, 4 + 2 * i];
            for (k, &col) in cols.iter().enumerate() {
                let w = self.whiten[i] * d[k];
                j.fixed_view_mut::<4, 1>(4 * i, col).copy_from(&w);
            }
        }
        j
    }
}

fn whitening(cov: &[[f64; 4]; 4], obs: &Vector4<f64>) -> Result<Matrix4<f64>> {
    let m = Matrix4::from_fn(|r, c| cov[r][c]);
    // Floor the variances at a part in 1e9 of the line energy so that
    // noiseless data stays well posed.
    let f = (1e-9 * obs[0].abs()).powi(2) + 1e-24;
    let floor = Matrix4::from_diagonal_element(f);
    let chol = (m + floor)
        .cholesky()
        .ok_or_else(|| Error::numerical("measurement covariance is not positive definite"))?;
    chol.l()
        .try_inverse()
        .ok_or_else(|| Error::numerical("measurement covariance is singular"))
}

/// Multipliers on the seed coupling for the global-fit starts.
const START_SCALES: [f64; 4] = [1.0, 0.7, 1.4, 2.0];

/// Starting vector for the global fit: per-point detunings invert the model
/// separation `2 Re q(Δ)` for the given global parameters.
fn global_start(pts: &[MeasuredPoint], active: &[usize], g: f64, gc: f64, gx: f64) -> DVector<f64> {
    let v = 0.25 * (gx - gc);
    let sep = |d: f64| 2.0 * (Complex64::new(g * g, 0.0) + Complex64::new(0.5 * d, -v).powi(2)).sqrt().re;
    let mut x = vec![g, gc, gx];
    for &i in active {
        let p = &pts[i];
        let target = p.splitting();
        let mut hi = 2.0 * target + 4.0 * v.abs() + 4.0 * g + 1.0;
        let mut lo = 0.0;
        if sep(0.0) < target {
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if sep(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        // Δ > 0 puts the narrower, exciton-like line on top.
        let sign = if p.upper.fwhm < p.lower.fwhm { 1.0 } else { -1.0 };
        x.push(sign * 0.5 * (lo + hi) * (sep(0.0) < target) as u8 as f64);
        x.push(0.5 * (p.upper.energy + p.lower.energy));
    }
    DVector::from_vec(x)
}

fn extract_global(curve: &MeasuredAnticrossing) -> Result<CouplingExtraction> {
    let seed = extract_min_separation(curve);
    let pts = &curve.points;
    let s0 = seed.splitting.uev();
    let mut active: Vec<usize> = (0..pts.len()).collect();
    let mut last = None;
    for _ in 0..OUTLIER_ROUNDS {
        let obs: Vec<Vector4<f64>> = active
            .iter()
            .map(|&i| Vector4::new(pts[i].upper.energy, pts[i].lower.energy, pts[i].upper.fwhm, pts[i].lower.fwhm))
            .collect();
        let whiten = active
            .iter()
            .zip(&obs)
            .map(|(&i, o)| whitening(&pts[i].covariance, o))
            .collect::<Result<Vec<_>>>()?;
        let problem = GlobalProblem { obs, whiten };
        let cfg = LmConfig { max_iterations: 500, ..LmConfig::default() };
        let (gc0, gx0) = (seed.gamma_c.uev(), seed.gamma_x.uev().max(0.0));
        let g0 = (0.25 * s0 * s0 + (gc0 - gx0).powi(2) / 16.0).sqrt().max(1e-3);
        let res = START_SCALES
            .iter()
            .map(|k| {
                let x0 = global_start(pts, &active, k * g0, gc0, gx0);
                minimize(&problem, x0, &cfg)
            })
            .filter(|r| r.cost.is_finite() && r.x[1] >= 0.0 && r.x[2] >= 0.0)
            // Converged starts first, then lowest cost.
            .min_by(|a, b| b.converged.cmp(&a.converged).then(a.cost.total_cmp(&b.cost)))
            .ok_or_else(|| Error::numerical("global anticrossing fit did not converge"))?;
        // A gross outlier can stall convergence, so clip on the best start
        // whether or not it converged.
        let keep: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|(k, _)| res.residuals.rows(4 * k, 4).norm_squared() <= OUTLIER_SIGMA * OUTLIER_SIGMA)
            .map(|(_, &i)| i)
            .collect();
        let done = keep.len() == active.len();
        last = Some((res, active.clone()));
        if done || keep.len() < MIN_SERIES_POINTS {
            break;
        }
        active = keep;
    }
    let (res, active) = last.expect("at least one round runs");
    if !res.converged {
        return Err(Error::numerical("global anticrossing fit did not converge"));
    }
    let dof = res.residuals.len().saturating_sub(res.x.len()).max(1);
    let chi2_red = 2.0 * res.cost / dof as f64;
    // A point exactly at resonance with equal bare widths has a null
    // detuning column; a tiny ridge leaves the global block unaffected.
    let mut jtj = res.jacobian.transpose() * &res.jacobian;
    let ridge = 1e-12 * jtj.diagonal().amax();
    for k in 0..jtj.nrows() {
        jtj[(k, k)] += ridge;
    }
    let inv = jtj
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::numerical("global fit covariance is singular"))?;
    let scale = chi2_red.max(1.0);
    let (g, gc, gx) = (res.x[0].abs(), res.x[1], res.x[2]);
    // Transform g → g² for the covariance.
    let jac = [2.0 * g, 1.0, 1.0];
    let mut cov = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            cov[r][c] = jac[r] * inv[(r, c)] * jac[c] * scale;
        }
    }
    let temps: Vec<f64> = active.iter().map(|&i| pts[i].temperature).collect();
    let deltas: Vec<f64> = (0..active.len()).map(|k| res.x[3 + 2 * k]).collect();
    // Without a sign change (equal bare widths leave the sign of Δ
    // undetermined) fall back to the smallest |Δ| away from the ends.
    let t_res = zero_crossing(&temps, &deltas).or_else(|| {
        let k = (0..deltas.len()).min_by(|&a, &b| deltas[a].abs().total_cmp(&deltas[b].abs()))?;
        (k > 0 && k + 1 < deltas.len()).then(|| temps[k])
    });
    Ok(finish(g * g, gc, gx, cov, t_res, ExtractionMethod::GlobalFit, active.len()))
}

fn zero_crossing(t: &[f64], y: &[f64]) -> Option<f64> {
    for k in 1..t.len() {
        if y[k - 1] == 0.0 {
            return Some(t[k - 1]);
        }
        if y[k - 1] * y[k] < 0.0 {
            return Some(t[k - 1] + (t[k] - t[k - 1]) * y[k - 1] / (y[k - 1] - y[k]));
        }
    }
    None
}

/// Two-point calibration of the temperature tuning. The cavity red-shifts
/// linearly and the exciton quadratically; `total_relative_shift` is the
/// change of `λ_x - λ_c` across the calibrated range, and the two coincide at
/// `crossing_temperature`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningCalibration {
    pub crossing_wavelength_nm: f64,
    pub crossing_temperature: f64,
    pub cavity_slope_nm_per_k: f64,
    pub total_relative_shift_nm: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl TuningCalibration {
    pub fn resonant_pump() -> Self {
        TuningCalibration {
            crossing_wavelength_nm: 936.35,
            crossing_temperature: 10.5,
            cavity_slope_nm_per_k: 0.1 / 34.0,
            total_relative_shift_nm: 1.5,
            t_min: 6.0,
            t_max: 40.0,
        }
    }

    pub fn above_band_pump() -> Self {
        TuningCalibration { crossing_temperature: 12.0, ..Self::resonant_pump() }
    }

    /// Quadratic exciton coefficient, nm/K².
    fn alpha(&self) -> f64 {
        (self.total_relative_shift_nm + self.cavity_slope_nm_per_k * (self.t_max - self.t_min))
            / (self.t_max * self.t_max - self.t_min * self.t_min)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.crossing_wavelength_nm > 0.0
            && self.t_min >= 0.0
            && self.t_max > self.t_min
            && self.cavity_slope_nm_per_k >= 0.0
            && self.alpha() > 0.0
            && (self.t_min..=self.t_max).contains(&self.crossing_temperature);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("inconsistent tuning calibration"))
        }
    }
}

/// Exciton and cavity wavelengths at temperature `t`.
pub fn temperature_tuning(t: Temperature, calib: &TuningCalibration) -> Result<(Wavelength, Wavelength)> {
    calib.validate()?;
    let k = t.kelvin();
    if !(calib.t_min..=calib.t_max).contains(&k) {
        return Err(Error::invalid(format!(
            "temperature {k} K outside the calibrated range [{}, {}] K",
            calib.t_min, calib.t_max
        )));
    }
    let tc = calib.crossing_temperature;
    let lc = calib.crossing_wavelength_nm + calib.cavity_slope_nm_per_k * (k - tc);
    let lx = calib.crossing_wavelength_nm + calib.alpha() * (k * k - tc * tc);
    Ok((Wavelength::from_nm(lx)?, Wavelength::from_nm(lc)?))
}

/// Device parameters at temperature `t`.
pub fn params_at_temperature(
    t: Temperature,
    calib: &TuningCalibration,
    gamma_x: Energy,
    gamma_c: Energy,
    coupling: Energy,
) -> Result<SystemParams> {
    let (lx, lc) = temperature_tuning(t, calib)?;
    SystemParams::new(wavelength_to_energy(lx), wavelength_to_energy(lc), gamma_x, gamma_c, coupling)
}

/// Settings of the synthetic temperature series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSpec {
    pub calibration: TuningCalibration,
    pub gamma_x: Energy,
    pub gamma_c: Energy,
    pub coupling: Energy,
    pub temperatures: Vec<f64>,
    pub pitch_nm: f64,
    pub half_window_nm: f64,
    /// Relative standard deviation of multiplicative Gaussian noise.
    pub noise: f64,
}

impl SeriesSpec {
    /// 6–20 K in 0.25 K steps, 0.03 nm pixels, 5% noise.
    pub fn pillar(gamma_x: Energy, gamma_c: Energy, coupling: Energy) -> Self {
        SeriesSpec {
            calibration: TuningCalibration::resonant_pump(),
            gamma_x,
            gamma_c,
            coupling,
            temperatures: (0..=56).map(|i| 6.0 + 0.25 * i as f64).collect(),
            pitch_nm: 0.03,
            half_window_nm: 0.6,
            noise: 0.05,
        }
    }
}

/// Lines of the emission spectrum at one temperature, in wavelength:
/// an equal mixture of exciton-excited and cavity-fed emission.
pub fn model_lines(p: &SystemParams) -> Vec<LorentzianParams> {
    let mut out = Vec::new();
    for init in [InitialExcitation::ExcitonExcited, InitialExcitation::CavityFed] {
        for (e, w) in model_lineshape(p, init).lines {
            let lambda = HC_UEV_NM / e.re;
            out.push(LorentzianParams {
                center: lambda,
                fwhm: e.fwhm().uev() * lambda * lambda / HC_UEV_NM,
                area: 0.5 * w,
            });
        }
    }
    out
}

/// One synthetic spectrum, rescaled to unit maximum before noise.
pub fn synthetic_spectrum(spec: &SeriesSpec, t: f64, rng: &mut ChaCha8Rng) -> Result<Spectrum> {
    let temp = Temperature::from_kelvin(t)?;
    let p = params_at_temperature(temp, &spec.calibration, spec.gamma_x, spec.gamma_c, spec.coupling)?;
    let (lx, lc) = temperature_tuning(temp, &spec.calibration)?;
    let mid = 0.5 * (lx.nm() + lc.nm());
    let n = (2.0 * spec.half_window_nm / spec.pitch_nm).round() as usize + 1;
    let wl: Vec<f64> = (0..n).map(|i| mid - spec.half_window_nm + i as f64 * spec.pitch_nm).collect();
    let lines = model_lines(&p);
    let h = spec.pitch_nm;
    let clean: Vec<f64> = wl
        .iter()
        .map(|&l| lines.iter().map(|ln| pixel_lorentzian(l - 0.5 * h, l + 0.5 * h, ln)).sum())
        .collect();
    let top = clean.iter().cloned().fold(f64::MIN, f64::max);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let y = clean
        .iter()
        .map(|v| {
            let noisy = v / top * (1.0 + spec.noise * normal.sample(rng));
            noisy.max(0.0)
        })
        .collect();
    Spectrum::new(wl, y, Some(temp))
}

/// A full synthetic series; seed `s` drives ChaCha8 stream 0.
pub fn synthetic_series(spec: &SeriesSpec, seed: u64) -> Result<Vec<Spectrum>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.temperatures.iter().map(|&t| synthetic_spectrum(spec, t, &mut rng)).collect()
}

/// Fits every spectrum of a series in parallel and assembles the curve from
/// the fits that succeeded.
pub fn fit_series(spectra: &[Spectrum]) -> Result<(Vec<Result<FitResult>>, MeasuredAnticrossing)> {
    let fits: Vec<Result<FitResult>> = spectra.par_iter().map(fit_spectrum).collect();
    let ok: Vec<FitResult> = fits.iter().filter_map(|f| f.as_ref().ok().cloned()).collect();
    let curve = assemble_anticrossing(&ok)?;
    Ok((fits, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn synth(lines: &[LorentzianParams], baseline: f64, wl: &[f64]) -> Spectrum {
        let s = Spectrum::new(wl.to_vec(), vec![0.0; wl.len()], None).unwrap();
        let e = s.edges();
        let y = (0..wl.len())
            .map(|i| baseline + lines.iter().map(|l| pixel_lorentzian(e[i], e[i + 1], l)).sum::<f64>())
            .collect();
        Spectrum::new(wl.to_vec(), y, None).unwrap()
    }

    fn grid(a: f64, b: f64, step: f64) -> Vec<f64> {
        let n = ((b - a) / step).round() as usize;
        (0..=n).map(|i| a + i as f64 * step).collect()
    }

    fn two_lines() -> [LorentzianParams; 2] {
        [
            LorentzianParams { center: 936.30, fwhm: 0.03, area: 1.0 },
            LorentzianParams { center: 936.42, fwhm: 0.05, area: 0.7 },
        ]
    }

    #[test]
    fn pixel_average_integrates_to_area() {
        let l = LorentzianParams { center: 500.0, fwhm: 0.01, area: 2.0 };
        let wl = grid(300.0, 700.0, 0.5);
        let s = synth(&[l], 0.0, &wl);
        let total: f64 = s.intensity.iter().sum::<f64>() * 0.5;
        assert!((total - 2.0).abs() < 1e-4);
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let truth = two_lines();
        let s = synth(&truth, 0.02, &grid(936.0, 936.7, 0.002));
        let seed = initial_guess(&s).unwrap();
        let fit = fit_double_lorentzian(&s, &seed).unwrap();
        assert!(fit.converged);
        for (f, t) in fit.lines.iter().zip(&truth) {
            assert!((f.center - t.center).abs() < 1e-6 * t.center);
            assert!((f.fwhm - t.fwhm).abs() < 1e-6 * t.fwhm);
            assert!((f.area - t.area).abs() < 1e-6 * t.area);
        }
        assert!((fit.baseline - 0.02).abs() < 1e-6);
        assert!(!fit.undersampled);
    }

    #[test]
    fn seeds_near_truth_for_separated_lines() {
        let truth = two_lines();
        let s = synth(&truth, 0.0, &grid(936.0, 936.7, 0.002));
        let seed = initial_guess(&s).unwrap();
        for (sd, t) in seed.lines.iter().zip(&truth) {
            assert!((sd.center - t.center).abs() < 0.1 * t.fwhm);
            assert!((sd.fwhm / t.fwhm - 1.0).abs() < 0.1, "{} vs {}", sd.fwhm, t.fwhm);
        }
    }

    #[test]
    fn symmetric_double_peak_gives_symmetric_seeds() {
        let lines = [
            LorentzianParams { center: 9.0, fwhm: 0.5, area: 1.0 },
            LorentzianParams { center: 11.0, fwhm: 0.5, area: 1.0 },
        ];
        let s = synth(&lines, 0.0, &grid(5.0, 15.0, 0.01));
        let seed = initial_guess(&s).unwrap();
        assert!((seed.lines[0].center + seed.lines[1].center - 20.0).abs() < 1e-9);
        assert!((seed.lines[0].fwhm - seed.lines[1].fwhm).abs() < 1e-9);
    }

    #[test]
    fn single_peak_seed_is_split_by_one_fwhm() {
        let l = LorentzianParams { center: 10.0, fwhm: 0.4, area: 1.0 };
        let s = synth(&[l], 0.0, &grid(5.0, 15.0, 0.01));
        let seed = initial_guess(&s).unwrap();
        let gap = seed.lines[1].center - seed.lines[0].center;
        assert!((gap - seed.lines[0].fwhm).abs() < 1e-12);
        assert!((seed.lines[0].fwhm - 0.4).abs() < 0.02);
    }

    #[test]
    fn flat_spectrum_has_no_signal() {
        let wl = grid(1.0, 2.0, 0.05);
        let s = Spectrum::new(wl.clone(), vec![1.0; wl.len()], None).unwrap();
        assert!(matches!(initial_guess(&s), Err(Error::InsufficientStatistics(_))));
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wl = grid(936.0, 936.7, 0.03);
        let s = synth(&two_lines(), 0.0, &wl);
        let prob = DoubleLorentzian::new(&s);
        for _ in 0..100 {
            let x = DVector::from_vec(vec![
                rng.random_range(936.1..936.6),
                rng.random_range(0.005..0.2),
                rng.random_range(0.1..2.0),
                rng.random_range(936.1..936.6),
                rng.random_range(0.005..0.2),
                rng.random_range(0.1..2.0),
                rng.random_range(0.0..0.5),
            ]);
            let j = prob.model_jacobian(&x);
            for k in 0..N_PARAMS {
                // Richardson-extrapolated central difference.
                let fd = |h: f64| {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[k] += h;
                    b[k] -= h;
                    (prob.model(&a) - prob.model(&b)) / (2.0 * h)
                };
                let h = if k < 6 && k % 3 == 0 { 1e-3 * x[k + 1] } else { 1e-4 * x[k].abs().max(1e-3) };
                let num = (fd(h) * 4.0 - fd(2.0 * h)) / 3.0;
                let col = j.column(k);
                let scale = col.amax().max(1e-12);
                assert!((col - &num).amax() < 1e-6 * scale, "param {k}");
            }
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_jacobian_at_optimum() {
        let spec = SeriesSpec::pillar(Energy::from_uev(0.94), Energy::from_uev(85.0), Energy::from_uev(35.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = synthetic_spectrum(&spec, 10.5, &mut rng).unwrap();
        let seed = initial_guess(&s).unwrap();
        for noise in [NoiseModel::Uniform, NoiseModel::default()] {
            let fit = fit_double_lorentzian_with(&s, &seed, noise).unwrap();
            assert!(fit.converged);
            let prob = DoubleLorentzian::new(&s).with_weights(fit.weights.clone());
            let x = fit.params();
            let r = prob.residuals(&x);
            let j = prob.jacobian(&x);
            for k in 0..N_PARAMS {
                let c = j.column(k);
                assert!(c.dot(&r).abs() <= 1e-6 * c.norm() * r.norm(), "{noise:?} column {k}");
            }
        }
    }

    #[test]
    fn tuning_calibration_points() {
        let c = TuningCalibration::resonant_pump();
        let rel = |t: f64| {
            let (x, cav) = temperature_tuning(Temperature::from_kelvin(t).unwrap(), &c).unwrap();
            x.nm() - cav.nm()
        };
        assert!((rel(40.0) - rel(6.0) - 1.5).abs() < 1e-12);
        assert!(rel(10.5).abs() < 1e-12);
        let ab = TuningCalibration::above_band_pump();
        let (x, cav) = temperature_tuning(Temperature::from_kelvin(12.0).unwrap(), &ab).unwrap();
        assert!((x.nm() - cav.nm()).abs() < 1e-12);
        assert!(temperature_tuning(Temperature::from_kelvin(41.0).unwrap(), &c).is_err());
        assert!(temperature_tuning(Temperature::from_kelvin(5.0).unwrap(), &c).is_err());
    }

    #[test]
    fn spectrum_csv_round_trip() {
        let s = Spectrum::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], vec![0.5; 8], Some(Temperature::from_kelvin(11.25).unwrap())).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(Spectrum::read_csv(buf.as_slice()).unwrap(), s);
        assert!(Spectrum::read_csv("1,2\n0.5,1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn tuning_is_monotone(a in 6.0f64..40.0, b in 6.0f64..40.0) {
            prop_assume!(a < b);
            let c = TuningCalibration::resonant_pump();
            let (xa, ca) = temperature_tuning(Temperature::from_kelvin(a).unwrap(), &c).unwrap();
            let (xb, cb) = temperature_tuning(Temperature::from_kelvin(b).unwrap(), &c).unwrap();
            prop_assert!(xb.nm() >= xa.nm() && cb.nm() >= ca.nm());
        }

        #[test]
        fn rescaling_leaves_fit_shape_unchanged(k in 0.01f64..100.0) {
            let s = synth(&two_lines(), 0.01, &grid(936.0, 936.7, 0.004));
            let a = fit_spectrum(&s).unwrap();
            let b = fit_spectrum(&s.scaled(k)).unwrap();
            for (la, lb) in a.lines.iter().zip(&b.lines) {
                prop_assert!((la.center - lb.center).abs() < 1e-7);
                prop_assert!((la.fwhm - lb.fwhm).abs() < 1e-7 * la.fwhm.max(1e-3) * 10.0);
            }
        }
    }
}
