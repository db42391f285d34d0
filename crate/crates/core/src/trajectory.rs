//! Monte Carlo wave-function unraveling of [`LindbladModel`] into
//! timestamped detector clicks.
//!
//! Time is discretized into ticks of [`TICK_PS`]. Between events the
//! unnormalized state evolves under `exp(-i H_eff t/ħ)`; propagators for
//! `2^k` ticks are tabulated once, so the waiting time to the next jump is
//! found by bisection on the (monotone) norm to single-tick resolution.
//!
//! # Seeding
//!
//! The run is split into fixed blocks (a number of pulses, or a fixed time
//! span for CW pumping), each starting from the ground state. Block `i`
//! draws its physics from ChaCha8 stream `3i`, its background photons from
//! stream `3i+1` and its detector efficiency/jitter from stream `3i+2`, all
//! keyed by the master seed. Dark counts use stream `u64::MAX`. Blocks run in
//! parallel and are concatenated in block order, so the output depends only
//! on the configuration and seed.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::coupled::{eigen_energies, InitialExcitation, SystemParams};
use crate::dynamics::{HilbertConfig, Jump, JumpKind, LindbladModel, Operators};
use crate::error::{Error, Result};
use crate::units::constants::HBAR_UEV_PS;

type C = Complex64;

pub const TICK_PS: f64 = 1.0 / 1024.0;
pub const PULSES_PER_BLOCK: u64 = 1024;
pub const CW_BLOCK_PS: f64 = 1.0e6;
/// Minimum ratio of the repetition period to the slowest mode lifetime.
pub const PULSE_SEPARATION_FACTOR: f64 = 10.0;
/// Cavity cutoff used for trajectories.
pub const TRAJECTORY_N_MAX: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PumpMode {
    ResonantPulsed,
    ResonantCw,
    AboveBandPulsed,
}

impl PumpMode {
    pub fn is_pulsed(self) -> bool {
        !matches!(self, PumpMode::ResonantCw)
    }
}

/// Excitation scheme. Rates are 1/ps, times ps.
///
/// Each pulse excites the dot with probability `excitation_prob` and loads a
/// carrier reservoir with a Poisson number of carriers (mean
/// `reservoir_mean`). While the reservoir is nonempty, carriers are captured
/// into the dot (σ† jumps) at `capture_rate`. `background_feed_rate` is an
/// independent Poissonian photon flux into the cavity channel. In CW mode
/// the dot is pumped incoherently at `cw_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpSchedule {
    pub mode: PumpMode,
    #[serde(default)]
    pub rep_period: f64,
    #[serde(default = "one")]
    pub excitation_prob: f64,
    #[serde(default)]
    pub reservoir_mean: f64,
    #[serde(default)]
    pub capture_rate: f64,
    #[serde(default)]
    pub background_feed_rate: f64,
    #[serde(default)]
    pub cw_rate: f64,
}

fn one() -> f64 {
    1.0
}

impl PumpSchedule {
    pub fn pulsed(rep_period: f64, excitation_prob: f64) -> Self {
        PumpSchedule {
            mode: PumpMode::ResonantPulsed,
            rep_period,
            excitation_prob,
            reservoir_mean: 0.0,
            capture_rate: 0.0,
            background_feed_rate: 0.0,
            cw_rate: 0.0,
        }
    }

    pub fn cw(rate: f64) -> Self {
        PumpSchedule { mode: PumpMode::ResonantCw, rep_period: 0.0, cw_rate: rate, ..Self::pulsed(0.0, 0.0) }
    }

    pub fn with_background(mut self, rate: f64) -> Self {
        self.background_feed_rate = rate;
        self
    }

    pub fn with_reservoir(mut self, mean: f64, capture_rate: f64) -> Self {
        self.reservoir_mean = mean;
        self.capture_rate = capture_rate;
        self
    }

    pub fn validate(&self, model: &LindbladModel) -> Result<()> {
        model.validate()?;
        let nonneg = [
            ("reservoir_mean", self.reservoir_mean),
            ("capture_rate", self.capture_rate),
            ("background_feed_rate", self.background_feed_rate),
            ("cw_rate", self.cw_rate),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("pump.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.excitation_prob) {
            return Err(Error::invalid(format!(
                "pump.excitation_prob must lie in [0, 1], got {}",
                self.excitation_prob
            )));
        }
        if self.reservoir_mean > 0.0 && self.capture_rate <= 0.0 {
            return Err(Error::invalid("pump.capture_rate must be > 0 when reservoir_mean > 0"));
        }
        if self.mode.is_pulsed() {
            let slowest = slowest_lifetime(model)?;
            if !(self.rep_period > PULSE_SEPARATION_FACTOR * slowest) {
                return Err(Error::invalid(format!(
                    "pump.rep_period {} ps must exceed {PULSE_SEPARATION_FACTOR} x the slowest mode lifetime ({slowest:.1} ps)",
                    self.rep_period
                )));
            }
        } else {
            if self.reservoir_mean > 0.0 {
                return Err(Error::invalid("pump.reservoir_mean applies to pulsed modes only"));
            }
            if self.cw_rate + model.exciton_pump <= 0.0 {
                return Err(Error::invalid("pump.cw_rate must be > 0 for resonant_cw"));
            }
        }
        Ok(())
    }
}

/// Longest normal-mode lifetime `ħ/FWHM` of the coupled system.
pub fn slowest_lifetime(model: &LindbladModel) -> Result<f64> {
    let p = SystemParams::new(model.exciton, model.cavity, model.gamma_x, model.gamma_c, model.coupling)?;
    let pair = eigen_energies(&p);
    let w = pair.upper.fwhm().uev().min(pair.lower.fwhm().uev());
    Ok(HBAR_UEV_PS / w)
}

/// Detector chain applied after the physics: efficiency thinning, Gaussian
/// jitter, per-channel dead time, then dark counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    #[serde(default = "one")]
    pub efficiency: f64,
    #[serde(default)]
    pub jitter_sigma: f64,
    #[serde(default)]
    pub dead_time: f64,
    /// Total dark-count rate, 1/ps.
    #[serde(default)]
    pub dark_count_rate: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel::ideal()
    }
}

impl DetectorModel {
    pub fn ideal() -> Self {
        DetectorModel { efficiency: 1.0, jitter_sigma: 0.0, dead_time: 0.0, dark_count_rate: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::invalid(format!("detectors.efficiency must lie in (0, 1], got {}", self.efficiency)));
        }
        for (name, v) in [
            ("jitter_sigma", self.jitter_sigma),
            ("dead_time", self.dead_time),
            ("dark_count_rate", self.dark_count_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("detectors.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClickChannel {
    C,
    X,
    D,
}

impl fmt::Display for ClickChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ClickChannel::C => "C",
            ClickChannel::X => "X",
            ClickChannel::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for ClickChannel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "C" | "c" => Ok(ClickChannel::C),
            "X" | "x" => Ok(ClickChannel::X),
            "D" | "d" => Ok(ClickChannel::D),
            other => Err(Error::invalid(format!("unknown channel `{other}` (expected C, X or D)"))),
        }
    }
}

/// A set of channels, written like `C`, `X` or `C+D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelSet {
    bits: u8,
}

impl ChannelSet {
    pub fn of(channels: &[ClickChannel]) -> Self {
        let mut s = ChannelSet::default();
        for &c in channels {
            s.bits |= Self::bit(c);
        }
        s
    }

    fn bit(c: ClickChannel) -> u8 {
        match c {
            ClickChannel::C => 1,
            ClickChannel::X => 2,
            ClickChannel::D => 4,
        }
    }

    pub fn contains(&self, c: ClickChannel) -> bool {
        self.bits & Self::bit(c) != 0
    }

    pub fn includes_dark(&self) -> bool {
        self.contains(ClickChannel::D)
    }
}

impl FromStr for ChannelSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let chans = s.split('+').map(str::parse).collect::<Result<Vec<ClickChannel>>>()?;
        Ok(ChannelSet::of(&chans))
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = [ClickChannel::C, ClickChannel::X, ClickChannel::D]
            .into_iter()
            .filter(|c| self.contains(*c))
            .map(|c| c.to_string())
            .collect();
        f.write_str(&names.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Click {
    pub channel: ClickChannel,
    pub time_ps: f64,
}

/// Time-ordered detector clicks plus the provenance header.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickStream {
    pub seed: u64,
    pub duration_ps: f64,
    pub config_hash: String,
    pub clicks: Vec<Click>,
}

const STREAM_MAGIC: &str = "#cqed-click-v1";

impl ClickStream {
    /// Times of clicks whose channel is in `set`, in order.
    pub fn times(&self, set: ChannelSet) -> Vec<f64> {
        self.clicks.iter().filter(|c| set.contains(c.channel)).map(|c| c.time_ps).collect()
    }

    pub fn count(&self, channel: ClickChannel) -> usize {
        self.clicks.iter().filter(|c| c.channel == channel).count()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{STREAM_MAGIC} seed={} duration_ps={} confighash={}",
            self.seed, self.duration_ps, self.config_hash
        )?;
        writeln!(w, "channel,time_ps")?;
        for c in &self.clicks {
            writeln!(w, "{},{:.1}", c.channel, c.time_ps)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, head) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
        let head = head?;
        let mut fields = head.split_whitespace();
        if fields.next() != Some(STREAM_MAGIC) {
            return Err(Error::Parse { line: 1, msg: format!("missing `{STREAM_MAGIC}` header") });
        }
        let (mut seed, mut duration, mut hash) = (None, None, None);
        for f in fields {
            let bad = || Error::Parse { line: 1, msg: format!("bad header field `{f}`") };
            let (k, v) = f.split_once('=').ok_or_else(bad)?;
            match k {
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                "duration_ps" => duration = Some(v.parse::<f64>().map_err(|_| bad())?),
                "confighash" => hash = Some(v.to_string()),
                _ => return Err(bad()),
            }
        }
        let missing = |what: &str| Error::Parse { line: 1, msg: format!("header lacks {what}") };
        let mut stream = ClickStream {
            seed: seed.ok_or_else(|| missing("seed"))?,
            duration_ps: duration.ok_or_else(|| missing("duration_ps"))?,
            config_hash: hash.ok_or_else(|| missing("confighash"))?,
            clicks: Vec::new(),
        };
        let mut last = f64::NEG_INFINITY;
        for (i, line) in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line == "channel,time_ps" {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (ch, t) = line.split_once(',').ok_or_else(|| perr(format!("expected `channel,time_ps`, got `{line}`")))?;
            let channel = ch.parse::<ClickChannel>().map_err(|e| perr(e.to_string()))?;
            let time_ps: f64 = t.trim().parse().map_err(|_| perr(format!("bad time `{t}`")))?;
            if time_ps < last {
                return Err(perr("click times must be nondecreasing".into()));
            }
            last = time_ps;
            stream.clicks.push(Click { channel, time_ps });
        }
        Ok(stream)
    }
}

/// Per-channel count rate with its Poisson standard error, in 1/ps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRate {
    pub channel: ClickChannel,
    pub counts: usize,
    pub rate: f64,
    pub error: f64,
}

pub fn channel_rates(stream: &ClickStream) -> Result<Vec<ChannelRate>> {
    if stream.clicks.is_empty() {
        return Err(Error::stats("click stream is empty"));
    }
    if !(stream.duration_ps > 0.0) {
        return Err(Error::invalid("stream duration must be > 0"));
    }
    Ok([ClickChannel::C, ClickChannel::X, ClickChannel::D]
        .into_iter()
        .map(|channel| {
            let counts = stream.count(channel);
            let t = stream.duration_ps;
            ChannelRate { channel, counts, rate: counts as f64 / t, error: (counts as f64).sqrt() / t }
        })
        .collect())
}

/// `exp(-i H_eff 2^k τ/ħ)` for `k = 0..levels`.
struct PropagatorTable {
    powers: Vec<DMatrix<C>>,
}

impl PropagatorTable {
    fn new(h_eff: &DMatrix<C>, levels: usize) -> Self {
        let powers = (0..levels)
            .map(|k| {
                let t = TICK_PS * (1u64 << k) as f64;
                (h_eff * C::new(0.0, -t / HBAR_UEV_PS)).exp()
            })
            .collect();
        PropagatorTable { powers }
    }

    fn apply(&self, ticks: u64, psi: &DVector<C>) -> DVector<C> {
        let mut out = psi.clone();
        let mut rest = ticks;
        let mut k = 0;
        while rest > 0 {
            if rest & 1 == 1 {
                out = &self.powers[k] * out;
            }
            rest >>= 1;
            k += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Lindblad(JumpKind),
    Capture,
}

/// Jump machinery shared by all trajectories of one configuration.
struct Unraveling {
    ops: Operators,
    jumps: Vec<Jump>,
    capture_rate: f64,
    raise: DMatrix<C>,
    free: PropagatorTable,
    capturing: Option<PropagatorTable>,
    levels: usize,
}

/// State of one trajectory. `psi` is unnormalized; a jump happens when its
/// squared norm falls to `threshold`.
struct Walker {
    psi: DVector<C>,
    threshold: f64,
    tick: u64,
    reservoir: u64,
}

impl Unraveling {
    fn new(model: &LindbladModel, capture_rate: f64, max_ticks: u64) -> Self {
        let cfg = HilbertConfig { n_max: TRAJECTORY_N_MAX };
        let ops = Operators::new(cfg);
        let jumps = ops.jumps(model);
        let raise = ops.sigma.adjoint();
        let h = ops.hamiltonian(model);
        let half_hbar = C::new(0.0, -0.5 * HBAR_UEV_PS);
        let mut loss = DMatrix::<C>::zeros(cfg.dim(), cfg.dim());
        for j in &jumps {
            loss += (j.op.adjoint() * &j.op) * C::new(j.rate, 0.0);
        }
        let levels = (64 - max_ticks.max(1).leading_zeros()) as usize + 1;
        let h_free = &h + &loss * half_hbar;
        let free = PropagatorTable::new(&h_free, levels);
        let capturing = (capture_rate > 0.0).then(|| {
            let extra = (&ops.sigma * &raise) * C::new(capture_rate, 0.0);
            PropagatorTable::new(&(&h_free + extra * half_hbar), levels)
        });
        Unraveling { ops, jumps, capture_rate, raise, free, capturing, levels }
    }

    fn walker(&self, psi: DVector<C>, rng: &mut ChaCha8Rng) -> Walker {
        Walker { psi, threshold: rng.random(), tick: 0, reservoir: 0 }
    }

    fn table(&self, w: &Walker) -> &PropagatorTable {
        match (&self.capturing, w.reservoir > 0) {
            (Some(t), true) => t,
            _ => &self.free,
        }
    }

    /// Normalizes the state and redraws the jump threshold. Statistically
    /// neutral: given no jump so far the rescaled threshold is uniform.
    fn renormalize(&self, w: &mut Walker, rng: &mut ChaCha8Rng) {
        let n = w.psi.norm();
        if n > 0.0 {
            w.psi /= C::new(n, 0.0);
        }
        w.threshold = rng.random();
    }

    /// Evolves until tick `horizon`, reporting each jump.
    fn run_until(&self, w: &mut Walker, horizon: u64, rng: &mut ChaCha8Rng, mut on_event: impl FnMut(u64, Event)) {
        while w.tick < horizon {
            let table = self.table(w);
            let remaining = horizon - w.tick;
            let end = table.apply(remaining, &w.psi);
            if end.norm_squared() > w.threshold {
                w.psi = end;
                w.tick = horizon;
                return;
            }
            let mut advanced = 0u64;
            for k in (0..self.levels).rev() {
                let step = 1u64 << k;
                if advanced + step >= remaining {
                    continue;
                }
                let cand = &table.powers[k] * &w.psi;
                if cand.norm_squared() > w.threshold {
                    w.psi = cand;
                    advanced += step;
                }
            }
            w.psi = &table.powers[0] * &w.psi;
            w.tick += advanced + 1;
            let event = self.jump(w, rng);
            if let Some(ev) = event {
                on_event(w.tick, ev);
            }
        }
    }

    fn jump(&self, w: &mut Walker, rng: &mut ChaCha8Rng) -> Option<Event> {
        let mut weights: Vec<(f64, Event)> = self
            .jumps
            .iter()
            .map(|j| (j.rate * (&j.op * &w.psi).norm_squared(), Event::Lindblad(j.kind)))
            .collect();
        if w.reservoir > 0 {
            weights.push((self.capture_rate * (&self.raise * &w.psi).norm_squared(), Event::Capture));
        }
        let total: f64 = weights.iter().map(|x| x.0).sum();
        if !(total > 0.0) {
            self.renormalize(w, rng);
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        let mut chosen = weights.len() - 1;
        for (i, (wt, _)) in weights.iter().enumerate() {
            if u < *wt {
                chosen = i;
                break;
            }
            u -= wt;
        }
        let event = weights[chosen].1;
        w.psi = match event {
            Event::Lindblad(_) => &self.jumps[chosen].op * &w.psi,
            Event::Capture => {
                w.reservoir -= 1;
                &self.raise * &w.psi
            }
        };
        self.renormalize(w, rng);
        Some(event)
    }

    /// Incoherent excitation pulse: with probability `p` the dot is raised
    /// (Kraus pair σ†, σ†σ, so an already excited dot stays excited).
    fn pulse(&self, w: &mut Walker, p: f64, reservoir: Option<&Poisson<f64>>, rng: &mut ChaCha8Rng) {
        self.renormalize(w, rng);
        if p > 0.0 && rng.random::<f64>() < p {
            let raised = &self.raise * &w.psi;
            let pr = raised.norm_squared();
            w.psi = if rng.random::<f64>() < pr { raised } else { &self.ops.sigma.adjoint() * (&self.ops.sigma * &w.psi) };
        }
        w.reservoir = reservoir.map_or(0, |d| d.sample(rng) as u64);
        self.renormalize(w, rng);
    }
}

fn block_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ticks(t_ps: f64) -> u64 {
    (t_ps / TICK_PS).round() as u64
}

/// Hashed description of a simulation.
#[derive(Serialize)]
struct StreamConfig<'a> {
    model: &'a LindbladModel,
    pump: &'a PumpSchedule,
    detector: &'a DetectorModel,
    duration_ps: f64,
}

/// Work unit: ticks `[start, end)` with pulse ticks inside.
struct Block {
    index: u64,
    start: u64,
    end: u64,
    pulses: Vec<u64>,
}

fn plan_blocks(pump: &PumpSchedule, duration_ps: f64) -> Vec<Block> {
    let total = ticks(duration_ps);
    if pump.mode.is_pulsed() {
        let n_pulses = (duration_ps / pump.rep_period).ceil() as u64;
        let pulse_tick = |k: u64| ticks(k as f64 * pump.rep_period);
        (0..n_pulses.div_ceil(PULSES_PER_BLOCK))
            .map(|b| {
                let first = b * PULSES_PER_BLOCK;
                let last = ((b + 1) * PULSES_PER_BLOCK).min(n_pulses);
                let end = if last == n_pulses { total } else { pulse_tick(last) };
                Block { index: b, start: pulse_tick(first), end, pulses: (first..last).map(pulse_tick).collect() }
            })
            .collect()
    } else {
        let span = ticks(CW_BLOCK_PS);
        (0..total.div_ceil(span))
            .map(|b| Block { index: b, start: b * span, end: ((b + 1) * span).min(total), pulses: Vec::new() })
            .collect()
    }
}

/// Generates a click stream. Pulses fire at `k·rep_period` for every
/// `k·rep_period < duration`; clicks are kept for emission times below
/// `duration` (before jitter).
pub fn simulate_stream(
    model: &LindbladModel,
    pump: &PumpSchedule,
    det: &DetectorModel,
    duration_ps: f64,
    seed: u64,
) -> Result<ClickStream> {
    pump.validate(model)?;
    det.validate()?;
    if !(duration_ps.is_finite() && duration_ps > 0.0) {
        return Err(Error::invalid("duration must be > 0"));
    }
    let mut physics = *model;
    physics.background_rate = 0.0;
    if pump.mode == PumpMode::ResonantCw {
        physics.exciton_pump += pump.cw_rate;
    }
    let background = model.background_rate + pump.background_feed_rate;
    let blocks = plan_blocks(pump, duration_ps);
    let max_span = blocks.iter().map(|b| b.end - b.start).max().unwrap_or(1);
    let engine = Unraveling::new(&physics, pump.capture_rate, max_span);
    let reservoir = (pump.reservoir_mean > 0.0)
        .then(|| Poisson::new(pump.reservoir_mean).map_err(|e| Error::invalid(format!("pump.reservoir_mean: {e}"))))
        .transpose()?;
    let jitter = (det.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, det.jitter_sigma).map_err(|e| Error::invalid(format!("detectors.jitter_sigma: {e}"))))
        .transpose()?;

    let per_block: Vec<Vec<Click>> = blocks
        .par_iter()
        .map(|b| {
            let mut rng = block_rng(seed, 3 * b.index);
            let mut clicks: Vec<(u64, ClickChannel)> = Vec::new();
            let mut w = engine.walker(engine.ops.ground_state(), &mut rng);
            w.tick = b.start;
            let record = |clicks: &mut Vec<(u64, ClickChannel)>, t: u64, ev: Event| {
                if let Event::Lindblad(kind) = ev {
                    if let Some(ch) = kind.detected() {
                        clicks.push((t, match ch {
                            crate::dynamics::DecayChannel::Cavity => ClickChannel::C,
                            crate::dynamics::DecayChannel::Exciton => ClickChannel::X,
                        }));
                    }
                }
            };
            for (i, &pt) in b.pulses.iter().enumerate() {
                if i > 0 {
                    engine.run_until(&mut w, pt, &mut rng, |t, ev| record(&mut clicks, t, ev));
                }
                engine.pulse(&mut w, pump.excitation_prob, reservoir.as_ref(), &mut rng);
            }
            engine.run_until(&mut w, b.end, &mut rng, |t, ev| record(&mut clicks, t, ev));
            clicks.retain(|&(t, _)| t < b.end);

            let mut out: Vec<Click> =
                clicks.into_iter().map(|(t, channel)| Click { channel, time_ps: t as f64 * TICK_PS }).collect();
            if background > 0.0 {
                let mut brng = block_rng(seed, 3 * b.index + 1);
                let (t0, t1) = (b.start as f64 * TICK_PS, b.end as f64 * TICK_PS);
                let n = poisson_count(background * (t1 - t0), &mut brng);
                out.extend((0..n).map(|_| Click { channel: ClickChannel::C, time_ps: brng.random_range(t0..t1) }));
                out.sort_by(|a, b| a.time_ps.total_cmp(&b.time_ps));
            }
            let mut drng = block_rng(seed, 3 * b.index + 2);
            out.retain(|_| det.efficiency >= 1.0 || drng.random::<f64>() < det.efficiency);
            if let Some(j) = &jitter {
                for c in &mut out {
                    c.time_ps += j.sample(&mut drng);
                }
            }
            out
        })
        .collect();

    let mut clicks: Vec<Click> = per_block.into_iter().flatten().collect();
    clicks.sort_by(|a, b| a.time_ps.total_cmp(&b.time_ps));
    if det.dead_time > 0.0 {
        apply_dead_time(&mut clicks, det.dead_time);
    }
    if det.dark_count_rate > 0.0 {
        let mut rng = block_rng(seed, u64::MAX);
        let n = poisson_count(det.dark_count_rate * duration_ps, &mut rng);
        clicks.extend((0..n).map(|_| Click { channel: ClickChannel::D, time_ps: rng.random_range(0.0..duration_ps) }));
        clicks.sort_by(|a, b| a.time_ps.total_cmp(&b.time_ps));
    }
    let hash = config_hash(&StreamConfig { model, pump, detector: det, duration_ps });
    Ok(ClickStream { seed, duration_ps, config_hash: hash, clicks })
}

fn poisson_count(mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Non-paralyzable dead time per channel on a time-sorted click list.
pub fn apply_dead_time(clicks: &mut Vec<Click>, dead_time: f64) {
    let mut last: [f64; 3] = [f64::NEG_INFINITY; 3];
    clicks.retain(|c| {
        let k = c.channel as usize;
        if c.time_ps - last[k] >= dead_time {
            last[k] = c.time_ps;
            true
        } else {
            false
        }
    });
}

/// Mean and standard error of a trajectory-averaged quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMean {
    pub mean: f64,
    pub std_err: f64,
}

/// Exciton population averaged over `n_traj` unpumped trajectories started
/// from `initial`, at each of the increasing `times` (ps).
pub fn trajectory_exciton_population(
    model: &LindbladModel,
    initial: InitialExcitation,
    times: &[f64],
    n_traj: u64,
    seed: u64,
) -> Result<Vec<SampleMean>> {
    model.validate()?;
    if n_traj < 2 {
        return Err(Error::stats("need at least two trajectories"));
    }
    if times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("sample times must be >= 0 and strictly increasing"));
    }
    let horizon = times.last().map_or(1, |t| ticks(*t));
    let engine = Unraveling::new(model, 0.0, horizon);
    let ee = engine.ops.sigma.adjoint() * &engine.ops.sigma;
    let sums = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = block_rng(seed, i);
            let mut w = engine.walker(engine.ops.basis_state(initial), &mut rng);
            times
                .iter()
                .map(|&t| {
                    engine.run_until(&mut w, ticks(t), &mut rng, |_, _| {});
                    let n2 = w.psi.norm_squared();
                    let pop = (w.psi.adjoint() * &ee * &w.psi)[(0, 0)].re / n2;
                    (pop, pop * pop)
                })
                .collect::<Vec<_>>()
        })
        .reduce(
            || vec![(0.0, 0.0); times.len()],
            |a, b| a.iter().zip(&b).map(|(x, y)| (x.0 + y.0, x.1 + y.1)).collect(),
        );
    let n = n_traj as f64;
    Ok(sums
        .into_iter()
        .map(|(s, s2)| {
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
            SampleMean { mean, std_err: (var / n).sqrt() }
        })
        .collect())
}
