//! Hanbury-Brown–Twiss analysis of click streams.
//!
//! Histograms count all pairs (multi-start, multi-stop). Bin `i` is centered
//! at `(i - n_half)·bin_width` and covers half a bin on either side.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{ChannelSet, ClickChannel, ClickStream};
use crate::units::Duration;

/// Chunk of start events correlated per parallel work item.
const CHUNK: usize = 1 << 14;
/// Default histogram bin width, ps.
pub const DEFAULT_BIN_PS: f64 = 128.0;
/// Default half window in repetition periods.
pub const DEFAULT_WINDOW_PERIODS: f64 = 13.0;
/// Subtraction beyond this many standard deviations is a miscalibration.
pub const DARK_SUBTRACTION_SIGMA: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub bin_width: f64,
    pub n_half: usize,
    pub counts: Vec<f64>,
    /// Variance of each bin from the raw counts, unchanged by subtraction.
    /// In an autocorrelation every pair lands at both ±τ, so the zero-delay
    /// bin holds each pair twice and carries twice its count.
    pub variance: Vec<f64>,
    pub singles_a: u64,
    pub singles_b: u64,
    pub duration: f64,
    pub auto: bool,
}

impl CorrelationHistogram {
    pub fn empty(window: f64, bin_width: f64, duration: f64, auto: bool) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::invalid("bin width must be > 0"));
        }
        if !(window >= bin_width && window.is_finite()) {
            return Err(Error::invalid("window must be at least one bin wide"));
        }
        if !(duration > 0.0) {
            return Err(Error::invalid("acquisition duration must be > 0"));
        }
        let n_half = (window / bin_width).round() as usize;
        let n = 2 * n_half + 1;
        Ok(CorrelationHistogram {
            bin_width,
            n_half,
            counts: vec![0.0; n],
            variance: vec![0.0; n],
            singles_a: 0,
            singles_b: 0,
            duration,
            auto,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn tau(&self, i: usize) -> f64 {
        (i as f64 - self.n_half as f64) * self.bin_width
    }

    /// Largest delay magnitude counted.
    pub fn reach(&self) -> f64 {
        (self.n_half as f64 + 0.5) * self.bin_width
    }

    fn bin_of(&self, tau: f64) -> Option<usize> {
        let k = (tau / self.bin_width + 0.5).floor() as i64 + self.n_half as i64;
        (0..self.len() as i64).contains(&k).then_some(k as usize)
    }

    pub fn total_pairs(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Adds another histogram with the same binning. Singles and durations
    /// accumulate, so partial histograms of consecutive segments merge into
    /// the histogram of the whole (up to pairs straddling segment edges).
    pub fn merge(&mut self, other: &CorrelationHistogram) -> Result<()> {
        if self.bin_width != other.bin_width || self.n_half != other.n_half || self.auto != other.auto {
            return Err(Error::invalid("histograms have different binning"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.variance.iter_mut().zip(&other.variance) {
            *a += b;
        }
        self.singles_a += other.singles_a;
        self.singles_b += other.singles_b;
        self.duration += other.duration;
        Ok(())
    }

    /// Expected uncorrelated pair count in bin `i` for rates `ra`, `rb`.
    fn accidentals(&self, i: usize, ra: f64, rb: f64) -> f64 {
        ra * rb * (self.duration - self.tau(i).abs()).max(0.0) * self.bin_width
    }

    pub fn rate_a(&self) -> f64 {
        self.singles_a as f64 / self.duration
    }

    pub fn rate_b(&self) -> f64 {
        self.singles_b as f64 / self.duration
    }

    /// `g²(τ)` per bin with its standard error, normalized by the
    /// accidental level of independent streams with the measured singles.
    pub fn normalized(&self) -> Result<Vec<(f64, f64, f64)>> {
        let (ra, rb) = (self.rate_a(), self.rate_b());
        if !(ra > 0.0 && rb > 0.0) {
            return Err(Error::stats("no singles to normalize by"));
        }
        Ok((0..self.len())
            .map(|i| {
                let norm = self.accidentals(i, ra, rb);
                (self.tau(i), self.counts[i] / norm, self.variance[i].max(1.0).sqrt() / norm)
            })
            .collect())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tau_ps,counts")?;
        for i in 0..self.len() {
            writeln!(w, "{},{}", self.tau(i), self.counts[i])?;
        }
        Ok(())
    }

    /// Sum of counts in bins whose centers lie in `[lo, hi)`, with variance.
    fn area(&self, lo: f64, hi: f64) -> (f64, f64) {
        let mut a = (0.0, 0.0);
        for i in 0..self.len() {
            let t = self.tau(i);
            if t >= lo && t < hi {
                a.0 += self.counts[i];
                a.1 += self.variance[i];
            }
        }
        a
    }
}

fn check_sorted(t: &[f64]) -> Result<()> {
    if t.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("click times must be sorted"));
    }
    Ok(())
}

fn accumulate(h: &mut CorrelationHistogram, starts: &[f64], offset: usize, stops: &[f64], auto: bool) {
    let reach = h.reach();
    let mut lo = starts.first().map_or(0, |&t| stops.partition_point(|&s| s < t - reach));
    for (k, &ta) in starts.iter().enumerate() {
        while lo < stops.len() && stops[lo] < ta - reach {
            lo += 1;
        }
        let mut j = lo;
        while j < stops.len() && stops[j] <= ta + reach {
            if !(auto && j == offset + k) {
                if let Some(b) = h.bin_of(stops[j] - ta) {
                    h.counts[b] += 1.0;
                }
            }
            j += 1;
        }
    }
}

fn correlate_impl(a: &[f64], b: &[f64], window: f64, bin_width: f64, duration: f64, auto: bool) -> Result<CorrelationHistogram> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::stats("no clicks to correlate"));
    }
    check_sorted(a)?;
    check_sorted(b)?;
    let template = CorrelationHistogram::empty(window, bin_width, duration, auto)?;
    let mut h = a
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut part = template.clone();
            accumulate(&mut part, chunk, c * CHUNK, b, auto);
            part
        })
        .reduce(
            || template.clone(),
            |mut x, y| {
                for (p, q) in x.counts.iter_mut().zip(&y.counts) {
                    *p += q;
                }
                x
            },
        );
    h.variance = h.counts.clone();
    if auto {
        h.variance[h.n_half] *= 2.0;
    }
    h.singles_a = a.len() as u64;
    h.singles_b = b.len() as u64;
    Ok(h)
}

/// Autocorrelation of one time-sorted click list; self-pairs are excluded.
pub fn autocorrelate(times: &[f64], window: f64, bin_width: f64, duration: f64) -> Result<CorrelationHistogram> {
    correlate_impl(times, times, window, bin_width, duration, true)
}

/// Cross-correlation: histogram of `t_b - t_a` over all pairs.
pub fn correlate(a: &[f64], b: &[f64], window: f64, bin_width: f64, duration: f64) -> Result<CorrelationHistogram> {
    correlate_impl(a, b, window, bin_width, duration, false)
}

/// Correlates channel selections of a stream; autocorrelation when `b` is
/// `None`.
pub fn correlate_stream(
    stream: &ClickStream,
    a: ChannelSet,
    b: Option<ChannelSet>,
    window: f64,
    bin_width: f64,
) -> Result<CorrelationHistogram> {
    let ta = stream.times(a);
    match b {
        None => autocorrelate(&ta, window, bin_width, stream.duration_ps),
        Some(b) => {
            if a.includes_dark() && b.includes_dark() {
                return Err(Error::invalid("dark clicks can be attributed to only one side of a cross-correlation"));
            }
            correlate(&ta, &stream.times(b), window, bin_width, stream.duration_ps)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum G2Method {
    PulsedPeakArea,
    CwNormalized,
}

impl G2Method {
    fn name(self) -> &'static str {
        match self {
            G2Method::PulsedPeakArea => "pulsed_peak_area",
            G2Method::CwNormalized => "cw_normalized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G2Estimate {
    pub value: f64,
    pub error: f64,
    pub method: G2Method,
}

impl G2Estimate {
    /// True if `value + k·error < bound`.
    pub fn below(&self, bound: f64, k: f64) -> bool {
        self.value + k * self.error < bound
    }

    /// Flat key-value report.
    pub fn report(&self, config_hash: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "value={:.6}", self.value);
        let _ = writeln!(s, "error={:.6}", self.error);
        let _ = writeln!(s, "method={}", self.method.name());
        let _ = writeln!(s, "confighash={config_hash}");
        s
    }
}

/// Ratio of a numerator area to the mean of side areas with Poisson errors.
fn area_ratio(num: (f64, f64), side: (f64, f64), n_side_total: usize) -> Result<(f64, f64)> {
    if !(side.0 > 0.0) {
        return Err(Error::stats("side peaks are empty"));
    }
    let m = side.0 / n_side_total as f64;
    let sm = side.1.max(1.0).sqrt() / n_side_total as f64;
    let sa = num.1.max(1.0).sqrt();
    let v = num.0 / m;
    let err = ((sa / m).powi(2) + (num.0 * sm / (m * m)).powi(2)).sqrt();
    Ok((v, err))
}

/// Pulsed `g²(0)`: area of the zero-delay peak over the mean area of
/// `n_side` peaks on each side, each integrated over ±rep_period/2.
pub fn pulsed_g2_zero(h: &CorrelationHistogram, rep_period: f64, n_side: usize) -> Result<G2Estimate> {
    if !(rep_period > 0.0) || n_side == 0 {
        return Err(Error::invalid("rep_period must be > 0 and n_side >= 1"));
    }
    if h.reach() + 1e-9 * rep_period < (n_side as f64 + 0.5) * rep_period {
        return Err(Error::invalid(format!(
            "window {} ps is shorter than (n_side + 1/2)·rep_period = {} ps",
            h.reach(),
            (n_side as f64 + 0.5) * rep_period
        )));
    }
    let half = 0.5 * rep_period;
    let mut center = h.area(-half, half);
    let mut side = (0.0, 0.0);
    for k in 1..=n_side {
        for s in [-1.0, 1.0] {
            let c = s * k as f64 * rep_period;
            let a = h.area(c - half, c + half);
            side.0 += a.0;
            side.1 += a.1;
        }
    }
    if h.auto {
        // Both areas are symmetric in τ, so every pair is counted twice.
        center.1 = 2.0 * center.1 - h.variance[h.n_half];
        side.1 *= 2.0;
    }
    let (value, error) = area_ratio(center, side, 2 * n_side)?;
    Ok(G2Estimate { value, error, method: G2Method::PulsedPeakArea })
}

/// Pulsed cross-correlation `g²_{x,c}(0)`; same estimator on a cross
/// histogram.
pub fn cross_g2_zero(h: &CorrelationHistogram, rep_period: f64, n_side: usize) -> Result<G2Estimate> {
    if h.auto {
        return Err(Error::invalid("cross_g2_zero needs a cross-correlation histogram"));
    }
    pulsed_g2_zero(h, rep_period, n_side)
}

/// CW `g²(0)`: zero-delay bin normalized by the accidental level.
pub fn cw_g2_zero(h: &CorrelationHistogram) -> Result<G2Estimate> {
    let (_, value, error) = h.normalized()?[h.n_half];
    Ok(G2Estimate { value, error, method: G2Method::CwNormalized })
}

/// Removes accidental coincidences involving dark counts. `dark_*` are the
/// dark rates and `singles_*` the total singles rates (1/ps) of each side.
pub fn subtract_dark_counts(
    h: &CorrelationHistogram,
    dark_a: f64,
    dark_b: f64,
    singles_a: f64,
    singles_b: f64,
) -> Result<CorrelationHistogram> {
    for v in [dark_a, dark_b, singles_a, singles_b] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid("rates must be finite and >= 0"));
        }
    }
    if dark_a > singles_a || dark_b > singles_b {
        return Err(Error::invalid("dark rate exceeds the singles rate"));
    }
    let mut out = h.clone();
    let excess = singles_a * singles_b - (singles_a - dark_a) * (singles_b - dark_b);
    if excess == 0.0 {
        return Ok(out);
    }
    for i in 0..out.len() {
        let sub = excess * (h.duration - h.tau(i).abs()).max(0.0) * h.bin_width;
        let c = h.counts[i];
        if sub - c > DARK_SUBTRACTION_SIGMA * sub.max(1.0).sqrt() {
            return Err(Error::invalid(format!(
                "dark subtraction of {sub:.1} exceeds the {c} counts at τ = {} ps by more than {DARK_SUBTRACTION_SIGMA}σ",
                h.tau(i)
            )));
        }
        out.counts[i] = (c - sub).max(0.0);
    }
    Ok(out)
}

/// Dark subtraction using the measured dark (`D`) rate of a stream for each
/// side whose channel selection includes it.
pub fn subtract_stream_darks(
    h: &CorrelationHistogram,
    stream: &ClickStream,
    a: ChannelSet,
    b: Option<ChannelSet>,
) -> Result<CorrelationHistogram> {
    let dark = stream.count(ClickChannel::D) as f64 / stream.duration_ps;
    let b = b.unwrap_or(a);
    let da = if a.includes_dark() { dark } else { 0.0 };
    let db = if b.includes_dark() { dark } else { 0.0 };
    subtract_dark_counts(h, da, db, h.rate_a(), h.rate_b())
}

/// Brute-force pulsed statistic from per-pulse click numbers:
/// `<n(n-1)>/<n>²` (auto) or `<n_a n_b>/(<n_a><n_b>)` (cross), with pulse
/// `k` owning `[k·rep - rep/2, (k+1)·rep - rep/2)`.
pub fn per_pulse_g2(a: &[f64], b: Option<&[f64]>, rep_period: f64, n_pulses: usize) -> Result<f64> {
    if n_pulses == 0 || !(rep_period > 0.0) {
        return Err(Error::invalid("need at least one pulse and rep_period > 0"));
    }
    let bin = |ts: &[f64]| {
        let mut n = vec![0.0f64; n_pulses];
        for &t in ts {
            let k = ((t + 0.5 * rep_period) / rep_period).floor();
            if k >= 0.0 && (k as usize) < n_pulses {
                n[k as usize] += 1.0;
            }
        }
        n
    };
    let na = bin(a);
    let p = n_pulses as f64;
    let (num, den) = match b {
        None => {
            let m = na.iter().sum::<f64>() / p;
            (na.iter().map(|n| n * (n - 1.0)).sum::<f64>() / p, m * m)
        }
        Some(b) => {
            let nb = bin(b);
            let ma = na.iter().sum::<f64>() / p;
            let mb = nb.iter().sum::<f64>() / p;
            (na.iter().zip(&nb).map(|(x, y)| x * y).sum::<f64>() / p, ma * mb)
        }
    };
    if !(den > 0.0) {
        return Err(Error::stats("no clicks in any pulse window"));
    }
    Ok(num / den)
}

/// Single-exponential lifetime fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimeFit {
    pub tau: Duration,
    pub error: f64,
    pub reduced_chi2: f64,
    /// Set when the binned tail deviates from an exponential (χ²/dof > 3).
    pub non_exponential: bool,
    pub counts_used: usize,
}

pub const MIN_LIFETIME_COUNTS: usize = 100;
pub const LIFETIME_CHI2_LIMIT: f64 = 3.0;

/// Maximum-likelihood lifetime from delays of first clicks after each
/// pulse. Only the tail `t > 3·jitter_sigma` is used, where Gaussian jitter
/// leaves the exponential shape intact.
pub fn fit_lifetime(delays: &[f64], jitter_sigma: f64) -> Result<LifetimeFit> {
    if !(jitter_sigma.is_finite() && jitter_sigma >= 0.0) {
        return Err(Error::invalid("jitter sigma must be >= 0"));
    }
    let t0 = 3.0 * jitter_sigma;
    let tail: Vec<f64> = delays.iter().copied().filter(|&t| t.is_finite() && t > t0).map(|t| t - t0).collect();
    let n = tail.len();
    if n < MIN_LIFETIME_COUNTS {
        return Err(Error::stats(format!("{n} counts in the fit tail, need {MIN_LIFETIME_COUNTS}")));
    }
    let tau = tail.iter().sum::<f64>() / n as f64;
    let error = tau / (n as f64).sqrt();

    // Goodness of fit on equal-probability bins of the fitted law.
    let nbins = ((n as f64).sqrt() as usize).clamp(5, 50);
    let mut obs = vec![0.0f64; nbins];
    for &t in &tail {
        let u = 1.0 - (-t / tau).exp();
        obs[((u * nbins as f64) as usize).min(nbins - 1)] += 1.0;
    }
    let expect = n as f64 / nbins as f64;
    let chi2: f64 = obs.iter().map(|o| (o - expect).powi(2) / expect).sum();
    let reduced_chi2 = chi2 / (nbins - 2) as f64;
    Ok(LifetimeFit {
        tau: Duration::from_ps(tau),
        error,
        reduced_chi2,
        non_exponential: reduced_chi2 > LIFETIME_CHI2_LIMIT,
        counts_used: n,
    })
}

/// Delay of the first click after each pulse, for pulses at `k·rep_period`.
pub fn first_click_delays(times: &[f64], rep_period: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut last_pulse = i64::MIN;
    for &t in times {
        let k = (t / rep_period).floor() as i64;
        if k != last_pulse {
            out.push(t - k as f64 * rep_period);
            last_pulse = k;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, Normal, Poisson};

    fn poisson_times(rate: f64, duration: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Poisson::new(rate * duration).unwrap().sample(&mut rng) as usize;
        let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..duration)).collect();
        t.sort_by(f64::total_cmp);
        t
    }

    #[test]
    fn poisson_autocorrelation_is_flat() {
        let (rate, dur, bw) = (1e-3, 1e8, 100.0);
        let t = poisson_times(rate, dur, 1);
        let h = autocorrelate(&t, 2000.0, bw, dur).unwrap();
        let r = t.len() as f64 / dur;
        for i in 0..h.len() {
            let expect = r * r * (dur - h.tau(i).abs()) * bw;
            assert!((h.counts[i] - expect).abs() < 4.0 * expect.sqrt(), "bin {i}: {} vs {expect}", h.counts[i]);
        }
        let g = cw_g2_zero(&h).unwrap();
        assert!((g.value - 1.0).abs() < 3.0 * g.error);
    }

    #[test]
    fn two_single_clicks() {
        let h = correlate(&[100.0], &[350.0], 1000.0, 10.0, 1e4).unwrap();
        assert_eq!(h.total_pairs(), 1.0);
        let i = h.counts.iter().position(|&c| c == 1.0).unwrap();
        assert_eq!(h.tau(i), 250.0);
    }

    #[test]
    fn autocorrelation_is_even_and_excludes_self_pairs() {
        let t = poisson_times(1e-3, 1e6, 2);
        let h = autocorrelate(&t, 500.0, 10.0, 1e6).unwrap();
        for i in 0..h.len() {
            assert_eq!(h.counts[i], h.counts[h.len() - 1 - i]);
        }
        let h = autocorrelate(&[5.0], 100.0, 10.0, 100.0).unwrap();
        assert_eq!(h.total_pairs(), 0.0);
    }

    #[test]
    fn empty_input_is_no_data() {
        assert!(matches!(autocorrelate(&[], 100.0, 10.0, 1.0), Err(Error::InsufficientStatistics(_))));
    }

    #[test]
    fn merging_segments_matches_whole() {
        let t = poisson_times(1e-3, 2e6, 3);
        let whole = autocorrelate(&t, 300.0, 10.0, 2e6).unwrap();
        // Split where no pair straddles the cut.
        let cut = t.windows(2).position(|w| w[1] - w[0] > 400.0 && w[0] > 1e6).unwrap() + 1;
        let mut a = autocorrelate(&t[..cut], 300.0, 10.0, 1e6).unwrap();
        let b = autocorrelate(&t[cut..], 300.0, 10.0, 1e6).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.counts, whole.counts);
        assert_eq!(a.singles_a, whole.singles_a);
    }

    #[test]
    fn ideal_pulse_train_has_no_center_peak() {
        let rep = 1000.0;
        let t: Vec<f64> = (0..5000).map(|k| k as f64 * rep + 20.0).collect();
        let h = autocorrelate(&t, 3.5 * rep, 50.0, 5000.0 * rep).unwrap();
        let g = pulsed_g2_zero(&h, rep, 3).unwrap();
        assert_eq!(g.value, 0.0);
        assert!(g.error > 0.0);
        assert!(pulsed_g2_zero(&h, rep, 4).is_err());
    }

    #[test]
    fn poisson_mixture_per_pulse_statistic() {
        // One photon per pulse plus Poisson(μ) background: (μ²+2μ)/(1+μ)².
        let (rep, mu) = (1000.0, 0.5f64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pois = Poisson::new(mu).unwrap();
        let mut t = Vec::new();
        let n_p = 200_000;
        for k in 0..n_p {
            let base = k as f64 * rep;
            t.push(base + rng.random_range(0.0..100.0));
            for _ in 0..(pois.sample(&mut rng) as usize) {
                t.push(base + rng.random_range(0.0..100.0));
            }
        }
        t.sort_by(f64::total_cmp);
        let exact = (mu * mu + 2.0 * mu) / (1.0 + mu).powi(2);
        let brute = per_pulse_g2(&t, None, rep, n_p).unwrap();
        assert!((brute - exact).abs() < 0.01, "{brute}");
        let h = autocorrelate(&t, 5.5 * rep, 50.0, n_p as f64 * rep).unwrap();
        let g = pulsed_g2_zero(&h, rep, 5).unwrap();
        assert!((g.value - brute).abs() < 3.0 * g.error + 1e-3, "{} vs {brute}", g.value);
    }

    #[test]
    fn independent_channels_cross_to_one() {
        let rep = 1000.0;
        let a = poisson_times(2e-4, 1e8, 4);
        let b = poisson_times(2e-4, 1e8, 5);
        let h = correlate(&a, &b, 10.5 * rep, 50.0, 1e8).unwrap();
        let g = cross_g2_zero(&h, rep, 10).unwrap();
        assert!((g.value - 1.0).abs() < 3.0 * g.error, "{g:?}");
    }

    #[test]
    fn dark_subtraction_zeroes_dark_only_data() {
        let dur = 1e8;
        let t = poisson_times(1e-3, dur, 6);
        let h = autocorrelate(&t, 1000.0, 50.0, dur).unwrap();
        let r = t.len() as f64 / dur;
        let s = subtract_dark_counts(&h, r, r, r, r).unwrap();
        let mean: f64 = s.counts.iter().sum::<f64>() / s.len() as f64;
        let scale = h.counts.iter().sum::<f64>() / h.len() as f64;
        assert!(mean < 0.1 * scale);
        assert_eq!(subtract_dark_counts(&h, 0.0, 0.0, r, r).unwrap(), h);
        assert!(subtract_dark_counts(&h, r, r, 10.0 * r, 10.0 * r).is_err());
    }

    fn exp_sample(tau: f64, n: usize, jitter: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Exp::new(1.0 / tau).unwrap();
        let j = Normal::new(0.0, jitter.max(1e-300)).unwrap();
        (0..n).map(|_| e.sample(&mut rng) + if jitter > 0.0 { j.sample(&mut rng) } else { 0.0 }).collect()
    }

    #[test]
    fn lifetime_recovery() {
        let fit = fit_lifetime(&exp_sample(620.0, 10_000, 0.0, 1), 0.0).unwrap();
        assert!((fit.tau.ps() - 620.0).abs() < 3.0 * fit.error, "{fit:?}");
        assert!(fit.error < 10.0);
        assert!(!fit.non_exponential);
    }

    #[test]
    fn lifetime_scales_with_time() {
        let d = exp_sample(300.0, 2000, 0.0, 2);
        let d2: Vec<f64> = d.iter().map(|t| 2.0 * t).collect();
        let a = fit_lifetime(&d, 0.0).unwrap();
        let b = fit_lifetime(&d2, 0.0).unwrap();
        assert!((b.tau.ps() - 2.0 * a.tau.ps()).abs() < 1e-9 * b.tau.ps());
    }

    #[test]
    fn lifetime_flags_non_exponential_data() {
        let d: Vec<f64> = (0..5000).map(|i| 100.0 + (i % 50) as f64).collect();
        assert!(fit_lifetime(&d, 0.0).unwrap().non_exponential);
        assert!(matches!(fit_lifetime(&d[..50], 0.0), Err(Error::InsufficientStatistics(_))));
    }

    #[test]
    fn lifetime_jitter_bias_is_small() {
        for (tau, seed) in [(200.0, 3), (620.0, 4)] {
            let fit = fit_lifetime(&exp_sample(tau, 200_000, 25.0, seed), 25.0).unwrap();
            assert!(((fit.tau.ps() - tau) / tau).abs() < 0.01, "{tau}: {fit:?}");
        }
    }

    #[test]
    fn first_click_per_pulse() {
        let d = first_click_delays(&[10.0, 20.0, 1005.0, 3002.0, 3003.0], 1000.0);
        assert_eq!(d, vec![10.0, 5.0, 2.0]);
    }
}
