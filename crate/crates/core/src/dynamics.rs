//! Lindblad master equation for one exciton coupled to a truncated cavity
//! mode (Jaynes–Cummings coupling in the rotating-wave approximation).
//!
//! Everything runs in a frame rotating at the mean of the bare exciton and
//! cavity energies. Energies are µeV, times ps and jump rates 1/ps. Density
//! matrices are vectorized column-major, `vec(AρB) = (Bᵀ ⊗ A) vec(ρ)`.
//!
//! This module is the reference the linear model and the trajectory
//! simulator are checked against.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coupled::{InitialExcitation, SystemParams};
use crate::error::{Error, Result};
use crate::units::{constants::HBAR_UEV_PS, Energy};

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);

/// Population allowed in the top Fock level before results are considered
/// cutoff-limited.
pub const CUTOFF_POPULATION_LIMIT: f64 = 1e-6;
/// Trace drift tolerated during evolution.
pub const TRACE_TOLERANCE: f64 = 1e-8;

/// Cavity Fock cutoff. Total Hilbert dimension is `2·(n_max+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HilbertConfig {
    pub n_max: usize,
}

impl HilbertConfig {
    pub fn new(n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::invalid("cavity cutoff n_max must be >= 1"));
        }
        Ok(HilbertConfig { n_max })
    }

    pub fn dim(&self) -> usize {
        2 * (self.n_max + 1)
    }

    /// Basis index of `|qd, n>` with `qd` = 0 (ground) or 1 (exciton).
    pub fn index(&self, excited: bool, n: usize) -> usize {
        usize::from(excited) * (self.n_max + 1) + n
    }

    /// Total excitation number of a basis index.
    pub fn excitations(&self, idx: usize) -> usize {
        idx / (self.n_max + 1) + idx % (self.n_max + 1)
    }

    fn photons(&self, idx: usize) -> usize {
        idx % (self.n_max + 1)
    }
}

impl Default for HilbertConfig {
    fn default() -> Self {
        HilbertConfig { n_max: 2 }
    }
}

/// Detected decay channel: cavity leakage (C) or exciton leaky emission (X).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecayChannel {
    #[serde(rename = "C")]
    Cavity,
    #[serde(rename = "X")]
    Exciton,
}

/// Open-system model. Decay rates follow from the linewidths, `γ/ħ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LindbladModel {
    pub exciton: Energy,
    pub cavity: Energy,
    pub gamma_x: Energy,
    pub gamma_c: Energy,
    pub coupling: Energy,
    /// Incoherent exciton pump (σ† jumps), 1/ps.
    pub exciton_pump: f64,
    /// Phenomenological off-resonant transfer of the exciton into the cavity
    /// mode (a†σ jumps), 1/ps.
    pub cavity_feed: f64,
    /// Independent Poissonian photon flux added to the detected cavity
    /// channel, 1/ps. Has no Hilbert-space dynamics.
    pub background_rate: f64,
    /// Pure exciton dephasing (σ†σ jumps), 1/ps. Off unless set explicitly.
    pub dephasing: f64,
}

impl LindbladModel {
    pub fn from_params(p: &SystemParams) -> Self {
        LindbladModel {
            exciton: p.exciton,
            cavity: p.cavity,
            gamma_x: p.gamma_x,
            gamma_c: p.gamma_c,
            coupling: p.coupling,
            exciton_pump: 0.0,
            cavity_feed: 0.0,
            background_rate: 0.0,
            dephasing: 0.0,
        }
    }

    pub fn with_exciton_pump(mut self, rate: f64) -> Self {
        self.exciton_pump = rate;
        self
    }

    pub fn with_cavity_feed(mut self, rate: f64) -> Self {
        self.cavity_feed = rate;
        self
    }

    pub fn with_background(mut self, rate: f64) -> Self {
        self.background_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gamma_x", self.gamma_x.uev()),
            ("gamma_c", self.gamma_c.uev()),
            ("coupling", self.coupling.uev()),
            ("exciton_pump", self.exciton_pump),
            ("cavity_feed", self.cavity_feed),
            ("background_rate", self.background_rate),
            ("dephasing", self.dephasing),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.exciton.is_finite() && self.cavity.is_finite()) {
            return Err(Error::invalid("mode energies must be finite"));
        }
        Ok(())
    }

    /// Energy of the rotating frame.
    pub fn frame_energy(&self) -> Energy {
        (self.exciton + self.cavity) * 0.5
    }

    pub fn decay_rate(&self, channel: DecayChannel) -> f64 {
        match channel {
            DecayChannel::Cavity => self.gamma_c.rate_per_ps(),
            DecayChannel::Exciton => self.gamma_x.rate_per_ps(),
        }
    }
}

/// Operators of the truncated space.
#[derive(Debug, Clone)]
pub struct Operators {
    pub cfg: HilbertConfig,
    /// Cavity annihilation `a`.
    pub a: DMatrix<C>,
    /// Exciton lowering `σ`.
    pub sigma: DMatrix<C>,
}

impl Operators {
    pub fn new(cfg: HilbertConfig) -> Self {
        let d = cfg.dim();
        let mut a = DMatrix::zeros(d, d);
        let mut sigma = DMatrix::zeros(d, d);
        for q in [false, true] {
            for n in 1..=cfg.n_max {
                a[(cfg.index(q, n - 1), cfg.index(q, n))] = C::new((n as f64).sqrt(), 0.0);
            }
        }
        for n in 0..=cfg.n_max {
            sigma[(cfg.index(false, n), cfg.index(true, n))] = ONE;
        }
        Operators { cfg, a, sigma }
    }

    pub fn lowering(&self, channel: DecayChannel) -> &DMatrix<C> {
        match channel {
            DecayChannel::Cavity => &self.a,
            DecayChannel::Exciton => &self.sigma,
        }
    }

    /// Rotating-frame Hamiltonian in µeV.
    pub fn hamiltonian(&self, m: &LindbladModel) -> DMatrix<C> {
        let e0 = m.frame_energy().uev();
        let ad = self.a.adjoint();
        let sd = self.sigma.adjoint();
        let g = C::new(m.coupling.uev(), 0.0);
        (&sd * &self.sigma) * C::new(m.exciton.uev() - e0, 0.0)
            + (&ad * &self.a) * C::new(m.cavity.uev() - e0, 0.0)
            + (&ad * &self.sigma + &sd * &self.a) * g
    }

    /// Jump operators with rates (1/ps) and the detected channel, if any.
    pub fn jumps(&self, m: &LindbladModel) -> Vec<Jump> {
        let sd = self.sigma.adjoint();
        let mut out = vec![
            Jump { rate: m.gamma_c.rate_per_ps(), op: self.a.clone(), kind: JumpKind::CavityDecay },
            Jump { rate: m.gamma_x.rate_per_ps(), op: self.sigma.clone(), kind: JumpKind::ExcitonDecay },
        ];
        if m.exciton_pump > 0.0 {
            out.push(Jump { rate: m.exciton_pump, op: sd.clone(), kind: JumpKind::ExcitonPump });
        }
        if m.cavity_feed > 0.0 {
            out.push(Jump { rate: m.cavity_feed, op: self.a.adjoint() * &self.sigma, kind: JumpKind::CavityFeed });
        }
        if m.dephasing > 0.0 {
            out.push(Jump { rate: m.dephasing, op: &sd * &self.sigma, kind: JumpKind::Dephasing });
        }
        out
    }

    pub fn basis_state(&self, initial: InitialExcitation) -> DVector<C> {
        let mut v = DVector::zeros(self.cfg.dim());
        let idx = match initial {
            InitialExcitation::ExcitonExcited => self.cfg.index(true, 0),
            InitialExcitation::CavityFed => self.cfg.index(false, 1),
        };
        v[idx] = ONE;
        v
    }

    pub fn ground_state(&self) -> DVector<C> {
        let mut v = DVector::zeros(self.cfg.dim());
        v[0] = ONE;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpKind {
    CavityDecay,
    ExcitonDecay,
    ExcitonPump,
    CavityFeed,
    Dephasing,
}

impl JumpKind {
    pub fn detected(self) -> Option<DecayChannel> {
        match self {
            JumpKind::CavityDecay => Some(DecayChannel::Cavity),
            JumpKind::ExcitonDecay => Some(DecayChannel::Exciton),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Jump {
    pub rate: f64,
    pub op: DMatrix<C>,
    pub kind: JumpKind,
}

fn kron(a: &DMatrix<C>, b: &DMatrix<C>) -> DMatrix<C> {
    a.kronecker(b)
}

pub fn vectorize(rho: &DMatrix<C>) -> DVector<C> {
    DVector::from_column_slice(rho.as_slice())
}

pub fn unvectorize(v: &DVector<C>, d: usize) -> DMatrix<C> {
    DMatrix::from_column_slice(d, d, v.as_slice())
}

/// The Liouvillian superoperator of a model on a truncated space.
#[derive(Debug, Clone)]
pub struct Liouvillian {
    pub ops: Operators,
    pub model: LindbladModel,
    pub matrix: DMatrix<C>,
}

impl Liouvillian {
    pub fn new(model: &LindbladModel, cfg: HilbertConfig) -> Result<Self> {
        model.validate()?;
        let ops = Operators::new(cfg);
        let d = cfg.dim();
        let id = DMatrix::<C>::identity(d, d);
        let h = ops.hamiltonian(model) / C::new(HBAR_UEV_PS, 0.0);
        let minus_i = C::new(0.0, -1.0);
        let mut l = (kron(&id, &h) - kron(&h.transpose(), &id)) * minus_i;
        for j in ops.jumps(model) {
            let ldl = j.op.adjoint() * &j.op;
            let term = kron(&j.op.conjugate(), &j.op)
                - kron(&id, &ldl) * C::new(0.5, 0.0)
                - kron(&ldl.transpose(), &id) * C::new(0.5, 0.0);
            l += term * C::new(j.rate, 0.0);
        }
        Ok(Liouvillian { ops, model: *model, matrix: l })
    }

    pub fn dim(&self) -> usize {
        self.ops.cfg.dim()
    }

    /// Propagator `exp(L·t)`.
    pub fn propagator(&self, t: f64) -> DMatrix<C> {
        (&self.matrix * C::new(t, 0.0)).exp()
    }

    /// Index in `vec(ρ)` of the element `ρ[i, j]`.
    fn vindex(&self, i: usize, j: usize) -> usize {
        i + j * self.dim()
    }

    /// Steady state found from `L ρ = 0` with unit trace.
    pub fn steady_state(&self) -> Result<DMatrix<C>> {
        let d = self.dim();
        let n = d * d;
        let mut m = self.matrix.clone();
        let mut rhs = DVector::<C>::zeros(n);
        for col in 0..n {
            m[(0, col)] = ZERO;
        }
        for i in 0..d {
            m[(0, self.vindex(i, i))] = ONE;
        }
        rhs[0] = ONE;
        let x = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::numerical("steady state is not unique: singular Liouvillian"))?;
        let residual = (&self.matrix * &x).norm();
        let scale = self.matrix.norm() * x.norm();
        if residual > 1e-9 * scale.max(1.0) {
            return Err(Error::numerical(format!(
                "steady state did not converge (residual {residual:e}); reduce pump or increase cutoff"
            )));
        }
        let mut rho = unvectorize(&x, d);
        rho = (&rho + rho.adjoint()) * C::new(0.5, 0.0);
        Ok(rho)
    }

    /// `Y = ∫ (ρ(t) - ρ_ss) dt` for evolution from `rho0`, found from
    /// `L Y = ρ_ss - ρ0` with `Tr Y = 0`.
    pub fn integrated_deviation(&self, rho0: &DMatrix<C>) -> Result<DMatrix<C>> {
        let d = self.dim();
        let n = d * d;
        let rho_ss = self.steady_state()?;
        let mut m = self.matrix.clone();
        let mut rhs = vectorize(&(&rho_ss - rho0));
        for col in 0..n {
            m[(0, col)] = ZERO;
        }
        for i in 0..d {
            m[(0, self.vindex(i, i))] = ONE;
        }
        rhs[0] = ZERO;
        let y = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::numerical("time-integrated state: singular system"))?;
        Ok(unvectorize(&y, d))
    }

    /// Indices of `vec(ρ)` reachable from the support of `v` under `L`.
    fn invariant_support(&self, v: &DVector<C>) -> Vec<usize> {
        let n = v.len();
        let mut seen: BTreeSet<usize> = (0..n).filter(|&i| v[i] != ZERO).collect();
        let mut frontier: Vec<usize> = seen.iter().copied().collect();
        while let Some(col) = frontier.pop() {
            for row in 0..n {
                if self.matrix[(row, col)] != ZERO && seen.insert(row) {
                    frontier.push(row);
                }
            }
        }
        seen.into_iter().collect()
    }
}

fn expect(op: &DMatrix<C>, rho: &DMatrix<C>) -> C {
    (op * rho).trace()
}

/// Exciton population `Tr(σ†σ ρ)`.
pub fn exciton_population(ops: &Operators, rho: &DMatrix<C>) -> f64 {
    expect(&(ops.sigma.adjoint() * &ops.sigma), rho).re
}

/// Mean photon number `Tr(a†a ρ)`.
pub fn photon_number(ops: &Operators, rho: &DMatrix<C>) -> f64 {
    expect(&(ops.a.adjoint() * &ops.a), rho).re
}

/// Population in the highest retained Fock level.
pub fn cutoff_population(cfg: HilbertConfig, rho: &DMatrix<C>) -> f64 {
    (0..cfg.dim()).filter(|&i| cfg.photons(i) == cfg.n_max).map(|i| rho[(i, i)].re).sum()
}

pub fn density_from_state(psi: &DVector<C>) -> DMatrix<C> {
    psi * psi.adjoint()
}

/// Evolves `rho0` (the state at t = 0) and returns the state at each time in
/// the increasing grid `times`.
pub fn evolve(
    model: &LindbladModel,
    cfg: HilbertConfig,
    rho0: &DMatrix<C>,
    times: &[f64],
) -> Result<Vec<DMatrix<C>>> {
    let liou = Liouvillian::new(model, cfg)?;
    let d = cfg.dim();
    if rho0.nrows() != d || rho0.ncols() != d {
        return Err(Error::invalid(format!("initial state must be {d}x{d}")));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("time grid must be finite, >= 0 and strictly increasing"));
    }
    let mut cached: Option<(f64, DMatrix<C>)> = None;
    let mut v = vectorize(rho0);
    let mut t_prev = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let dt = t - t_prev;
        if dt > 0.0 {
            let reuse = matches!(&cached, Some((h, _)) if (*h - dt).abs() <= 1e-12 * dt);
            if !reuse {
                cached = Some((dt, liou.propagator(dt)));
            }
            let (_, prop) = cached.as_ref().expect("propagator cached above");
            v = prop * &v;
        }
        t_prev = t;
        let rho = unvectorize(&v, d);
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > TRACE_TOLERANCE || tr.im.abs() > TRACE_TOLERANCE {
            return Err(Error::numerical(format!("trace drifted to {tr} at t = {t} ps")));
        }
        let top = cutoff_population(cfg, &rho);
        if top > CUTOFF_POPULATION_LIMIT {
            return Err(Error::numerical(format!(
                "population {top:e} in Fock level {}: increase n_max",
                cfg.n_max
            )));
        }
        out.push(rho);
    }
    Ok(out)
}

/// Decay rates (1/ps) of the two non-oscillating Liouvillian modes in the
/// one-excitation population sector, slowest first. With no pumping these
/// are `2|Im E_k|/ħ` of the two normal modes.
pub fn one_excitation_decay_rates(model: &LindbladModel) -> Result<[f64; 2]> {
    if model.exciton_pump > 0.0 {
        return Err(Error::invalid("linear decay rates require zero pumping"));
    }
    let cfg = HilbertConfig::new(1)?;
    let liou = Liouvillian::new(model, cfg)?;
    let one = [cfg.index(true, 0), cfg.index(false, 1)];
    let idx: Vec<usize> = one
        .iter()
        .flat_map(|&j| one.iter().map(move |&i| (i, j)))
        .map(|(i, j)| liou.vindex(i, j))
        .collect();
    let block = DMatrix::from_fn(4, 4, |r, c| liou.matrix[(idx[r], idx[c])]);
    let eig = block
        .clone()
        .schur()
        .eigenvalues()
        .ok_or_else(|| Error::numerical("Schur decomposition of the population block failed"))?;
    let mut rates: Vec<f64> = eig.iter().map(|l| -l.re).collect();
    rates.sort_by(f64::total_cmp);
    // Eigenvalues are {-2a, -(a+b)±iω, -2b} with a <= b; the cross terms sit
    // in the middle of the ordering.
    Ok([rates[0], rates[3]])
}

/// Mean number of photons emitted through each channel after a single
/// initial excitation, `(cavity, exciton)`.
pub fn photon_yields(
    model: &LindbladModel,
    cfg: HilbertConfig,
    initial: InitialExcitation,
) -> Result<(f64, f64)> {
    if model.exciton_pump > 0.0 {
        return Err(Error::invalid("photon yields require zero pumping"));
    }
    let liou = Liouvillian::new(model, cfg)?;
    let y = liou.integrated_deviation(&density_from_state(&liou.ops.basis_state(initial)))?;
    let ops = &liou.ops;
    let nc = model.decay_rate(DecayChannel::Cavity) * expect(&(ops.a.adjoint() * &ops.a), &y).re;
    let nx = model.decay_rate(DecayChannel::Exciton) * expect(&(ops.sigma.adjoint() * &ops.sigma), &y).re;
    Ok((nc, nx))
}

/// A normalized second-order correlation curve.
#[derive(Debug, Clone, PartialEq)]
pub struct G2Curve {
    pub tau: Vec<f64>,
    pub g2: Vec<f64>,
    /// Detected photon flux in 1/ps, background included.
    pub flux: f64,
}

impl G2Curve {
    pub fn g2_zero(&self) -> f64 {
        self.g2[0]
    }

    /// First delay at which the dip has recovered a fraction `1 - 1/e` of
    /// the way from `g2(0)` to its long-delay value 1. Linear interpolation
    /// between grid points.
    pub fn recovery_time(&self) -> Option<f64> {
        let g0 = self.g2[0];
        let target = g0 + (1.0 - g0) * (1.0 - (-1.0f64).exp());
        for k in 1..self.tau.len() {
            let (a, b) = (self.g2[k - 1], self.g2[k]);
            if (a - target) * (b - target) <= 0.0 && a != b {
                let f = (target - a) / (b - a);
                return Some(self.tau[k - 1] + f * (self.tau[k] - self.tau[k - 1]));
            }
        }
        None
    }
}

/// CW intensity correlation `g²(τ) = <I(t)I(t+τ)>/<I>²` of a detection
/// channel via the quantum regression theorem on the pumped steady state.
/// A background flux in the cavity channel adds Poissonian counts.
pub fn cw_g2(
    model: &LindbladModel,
    cfg: HilbertConfig,
    channel: DecayChannel,
    taus: &[f64],
) -> Result<G2Curve> {
    if !(model.exciton_pump > 0.0) {
        return Err(Error::invalid("CW correlation needs a steady state with exciton_pump > 0"));
    }
    if taus.is_empty() || taus.iter().any(|t| !t.is_finite() || *t < 0.0) || taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("delay grid must be >= 0 and strictly increasing"));
    }
    let liou = Liouvillian::new(model, cfg)?;
    let rho = liou.steady_state()?;
    let top = cutoff_population(cfg, &rho);
    if top > CUTOFF_POPULATION_LIMIT {
        return Err(Error::numerical(format!(
            "steady state reaches Fock level {} (population {top:e}); reduce pump or increase cutoff",
            cfg.n_max
        )));
    }
    let a = liou.ops.lowering(channel).clone();
    let ada = a.adjoint() * &a;
    let rate = model.decay_rate(channel);
    let signal = rate * expect(&ada, &rho).re;
    let background = match channel {
        DecayChannel::Cavity => model.background_rate,
        DecayChannel::Exciton => 0.0,
    };
    let flux = signal + background;
    if !(flux > 0.0) {
        return Err(Error::stats("channel carries no photon flux"));
    }
    let d = cfg.dim();
    let mut v = vectorize(&(&a * &rho * a.adjoint()));
    let mut t_prev = 0.0;
    let mut g2 = Vec::with_capacity(taus.len());
    let mut cached: Option<(f64, DMatrix<C>)> = None;
    for &t in taus {
        let dt = t - t_prev;
        if dt > 0.0 {
            let reuse = matches!(&cached, Some((h, _)) if (*h - dt).abs() <= 1e-12 * dt);
            if !reuse {
                cached = Some((dt, liou.propagator(dt)));
            }
            v = &cached.as_ref().expect("cached").1 * &v;
        }
        t_prev = t;
        let corr = rate * rate * expect(&ada, &unvectorize(&v, d)).re;
        g2.push((corr + 2.0 * signal * background + background * background) / (flux * flux));
    }
    Ok(G2Curve { tau: taus.to_vec(), g2, flux })
}

/// Emission spectrum on an energy grid, normalized to unit area.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpectrum {
    pub energy: Vec<Energy>,
    /// Spectral density per µeV.
    pub density: Vec<f64>,
    /// Fraction of the total emitted weight captured by the grid.
    pub captured: f64,
}

/// Minimum captured weight for [`emission_spectrum`].
pub const SPECTRUM_CAPTURE_REQUIRED: f64 = 0.999;

/// Spectrum of the light emitted through `channel` after a single initial
/// excitation, from the Fourier transform of `<A†(t)A(t+τ)>` integrated over
/// the emission time.
pub fn emission_spectrum(
    model: &LindbladModel,
    cfg: HilbertConfig,
    initial: InitialExcitation,
    channel: DecayChannel,
    grid: &[Energy],
) -> Result<EnergySpectrum> {
    if model.exciton_pump > 0.0 {
        return Err(Error::invalid("transient emission spectrum requires zero pumping"));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1].uev() <= w[0].uev()) {
        return Err(Error::invalid("energy grid must be strictly increasing with >= 2 points"));
    }
    let liou = Liouvillian::new(model, cfg)?;
    let d = cfg.dim();
    let rho0 = density_from_state(&liou.ops.basis_state(initial));
    let y = liou.integrated_deviation(&rho0)?;

    let a = liou.ops.lowering(channel).clone();
    let x = vectorize(&(&y * a.adjoint()));
    let total = 2.0 * std::f64::consts::PI * expect(&(a.adjoint() * &a), &y).re;
    if !(total > 0.0) {
        return Err(Error::stats("no emission into the requested channel"));
    }

    let support = liou.invariant_support(&x);
    let k = support.len();
    let block = DMatrix::from_fn(k, k, |r, c| liou.matrix[(support[r], support[c])]);
    let xs = DVector::from_fn(k, |r, _| x[support[r]]);
    // Tr[A Z] = Σ_ij A[j,i] Z[i,j]; weights per vectorized index.
    let aw: Vec<C> = support.iter().map(|&s| a[(s / d, s % d)]).collect();

    let e0 = model.frame_energy().uev();
    let mut density = Vec::with_capacity(grid.len());
    for e in grid {
        let omega = (e.uev() - e0) / HBAR_UEV_PS;
        let mut shifted = block.clone();
        for i in 0..k {
            shifted[(i, i)] += C::new(0.0, omega);
        }
        let z = shifted
            .lu()
            .solve(&xs)
            .ok_or_else(|| Error::numerical(format!("resolvent singular at {e}")))?;
        let tr: C = aw.iter().zip(z.iter()).map(|(w, zi)| w * zi).sum();
        // S(ω) = 2 Re Tr[A (-(L+iω)^-1) X], per unit ω; convert to per µeV.
        density.push(-2.0 * tr.re / HBAR_UEV_PS / total);
    }
    let captured: f64 = grid
        .windows(2)
        .zip(density.windows(2))
        .map(|(e, s)| 0.5 * (e[1].uev() - e[0].uev()) * (s[0] + s[1]))
        .sum();
    if captured < SPECTRUM_CAPTURE_REQUIRED {
        return Err(Error::invalid(format!(
            "energy grid captures only {:.5} of the emitted weight; widen it",
            captured
        )));
    }
    Ok(EnergySpectrum { energy: grid.to_vec(), density, captured })
}

/// Energy grid dense (`fine` spacing) within `±core` of each center and
/// geometrically spaced out to `±span` beyond.
pub fn adaptive_energy_grid(centers: &[Energy], core: f64, fine: f64, span: f64) -> Vec<Energy> {
    let mut pts: Vec<f64> = Vec::new();
    for c in centers {
        let c = c.uev();
        let n = (core / fine).ceil() as i64;
        for i in -n..=n {
            pts.push(c + i as f64 * fine);
        }
        let mut off = core;
        while off < span {
            off *= 1.02;
            pts.push(c + off);
            pts.push(c - off);
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * fine);
    pts.into_iter().map(Energy::from_uev).collect()
}
