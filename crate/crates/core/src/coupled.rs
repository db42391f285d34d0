//! Linear two-mode model of an exciton coupled to a cavity mode.
//!
//! The normal modes are the eigenvalues of the non-Hermitian matrix
//!
//! ```text
//! M = | E_x - iγ_x/2      g       |
//!     |      g        E_c - iγ_c/2 |
//! ```
//!
//! whose eigenvalues are
//! `(E_c+E_x)/2 - i(γ_c+γ_x)/4 ± sqrt(g² - (γ_c-γ_x-2iΔ)²/16)` with
//! `Δ = E_x - E_c`. The diagonal damping is half the FWHM, so each bare mode
//! has `Im E = -γ/2` and the FWHM of a normal mode is `2|Im E|`.

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{constants::HBAR_UEV_PS, ComplexEnergy, Duration, Energy};

/// Diagonal damping of each bare mode in units of its FWHM.
pub const MODE_DAMPING_PER_FWHM: f64 = 0.5;

/// Exciton weight above which a branch is called exciton-like (and below
/// `1 - BRANCH_CHARACTER_THRESHOLD` cavity-like).
pub const BRANCH_CHARACTER_THRESHOLD: f64 = 0.75;

/// Coupled exciton–cavity parameter set. The detuning is always derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub exciton: Energy,
    pub cavity: Energy,
    pub gamma_x: Energy,
    pub gamma_c: Energy,
    pub coupling: Energy,
}

impl SystemParams {
    pub fn new(
        exciton: Energy,
        cavity: Energy,
        gamma_x: Energy,
        gamma_c: Energy,
        coupling: Energy,
    ) -> Result<Self> {
        let p = SystemParams { exciton, cavity, gamma_x, gamma_c, coupling };
        p.validate()?;
        Ok(p)
    }

    /// Parameters with the cavity at `cavity` and the exciton detuned by `detuning`.
    pub fn with_detuning(
        cavity: Energy,
        detuning: Energy,
        gamma_x: Energy,
        gamma_c: Energy,
        coupling: Energy,
    ) -> Result<Self> {
        Self::new(cavity + detuning, cavity, gamma_x, gamma_c, coupling)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.exciton.is_finite() && self.cavity.is_finite()) {
            return Err(Error::invalid("mode energies must be finite"));
        }
        self.gamma_x.require_linewidth("gamma_x")?;
        self.gamma_c.require_linewidth("gamma_c")?;
        if !(self.coupling.is_finite() && self.coupling.uev() >= 0.0) {
            return Err(Error::invalid(format!("coupling must be >= 0, got {}", self.coupling)));
        }
        Ok(())
    }

    pub fn detuning(&self) -> Energy {
        self.exciton - self.cavity
    }

    /// Same device with the exciton moved to detuning `delta` from the cavity.
    pub fn at_detuning(&self, delta: Energy) -> Self {
        SystemParams { exciton: self.cavity + delta, ..*self }
    }

    pub fn mean_energy(&self) -> Energy {
        (self.exciton + self.cavity) * 0.5
    }

    /// The non-Hermitian coupled-mode matrix in the basis (exciton, cavity).
    pub fn coupling_matrix(&self) -> Matrix2<Complex64> {
        let k = MODE_DAMPING_PER_FWHM;
        let g = Complex64::new(self.coupling.uev(), 0.0);
        Matrix2::new(
            Complex64::new(self.exciton.uev(), -k * self.gamma_x.uev()),
            g,
            g,
            Complex64::new(self.cavity.uev(), -k * self.gamma_c.uev()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchCharacter {
    ExcitonLike,
    CavityLike,
    Mixed,
}

impl BranchCharacter {
    pub fn from_exciton_weight(w: f64) -> Self {
        if w >= BRANCH_CHARACTER_THRESHOLD {
            BranchCharacter::ExcitonLike
        } else if w <= 1.0 - BRANCH_CHARACTER_THRESHOLD {
            BranchCharacter::CavityLike
        } else {
            BranchCharacter::Mixed
        }
    }
}

/// One normal mode: complex energy, normalized right eigenvector in the
/// (exciton, cavity) basis and its exciton weight `|v_x|²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalMode {
    pub energy: ComplexEnergy,
    pub vector: Vector2<Complex64>,
}

impl NormalMode {
    pub fn exciton_weight(&self) -> f64 {
        self.vector[0].norm_sqr()
    }

    pub fn character(&self) -> BranchCharacter {
        BranchCharacter::from_exciton_weight(self.exciton_weight())
    }

    pub fn fwhm(&self) -> Energy {
        self.energy.fwhm()
    }
}

/// The two normal modes ordered by line center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenPair {
    pub upper: NormalMode,
    pub lower: NormalMode,
}

impl EigenPair {
    /// Center separation `Re(upper) - Re(lower)`.
    pub fn splitting(&self) -> Energy {
        Energy::from_uev(self.upper.energy.re - self.lower.energy.re)
    }
}

/// Complex square-root term of the closed form, `sqrt(g² - (γ_c-γ_x-2iΔ)²/16)`.
fn half_splitting(p: &SystemParams) -> Complex64 {
    let g = p.coupling.uev();
    let w = Complex64::new(p.gamma_c.uev() - p.gamma_x.uev(), -2.0 * p.detuning().uev()) / 4.0;
    (Complex64::new(g * g, 0.0) - w * w).sqrt()
}

/// Right eigenvector of the coupled-mode matrix for eigenvalue `lambda`.
fn eigenvector(p: &SystemParams, lambda: Complex64) -> Vector2<Complex64> {
    let m = p.coupling_matrix();
    let g = m[(0, 1)];
    // Either (g, λ - a) or (λ - d, g) spans the kernel of M - λ; take the
    // better-conditioned one.
    let v1 = Vector2::new(g, lambda - m[(0, 0)]);
    let v2 = Vector2::new(lambda - m[(1, 1)], g);
    let v = if v1.norm() >= v2.norm() { v1 } else { v2 };
    let n = v.norm();
    if n == 0.0 {
        // g = 0 with a degenerate pair: any basis vector works.
        Vector2::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0))
    } else {
        v / Complex64::new(n, 0.0)
    }
}

/// Closed-form complex eigen-energies with eigenvectors, ordered by `Re`.
pub fn eigen_energies(p: &SystemParams) -> EigenPair {
    let mean = Complex64::new(
        p.mean_energy().uev(),
        -0.5 * MODE_DAMPING_PER_FWHM * (p.gamma_c.uev() + p.gamma_x.uev()),
    );
    let (mut e_hi, mut e_lo) = if p.coupling.uev() == 0.0 {
        // exact bare modes
        let m = p.coupling_matrix();
        (m[(0, 0)], m[(1, 1)])
    } else {
        let s = half_splitting(p);
        (mean + s, mean - s)
    };
    if e_hi.re < e_lo.re {
        std::mem::swap(&mut e_hi, &mut e_lo);
    }
    let mut upper = NormalMode { energy: e_hi.into(), vector: eigenvector(p, e_hi) };
    let mut lower = NormalMode { energy: e_lo.into(), vector: eigenvector(p, e_lo) };
    if p.coupling.uev() == 0.0 && p.detuning().uev() == 0.0 {
        // degenerate centers: the eigenvectors are the bare modes, matched by damping
        let m = p.coupling_matrix();
        let x_first = e_hi == m[(0, 0)];
        let (one, zero) = (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
        let (ex, ec) = (Vector2::new(one, zero), Vector2::new(zero, one));
        upper.vector = if x_first { ex } else { ec };
        lower.vector = if x_first { ec } else { ex };
    }
    EigenPair { upper, lower }
}

/// Strict strong-coupling test `g² > (γ_c-γ_x)²/16`.
pub fn is_strongly_coupled(p: &SystemParams) -> bool {
    let g = p.coupling.uev();
    let d = p.gamma_c.uev() - p.gamma_x.uev();
    g * g > d * d / 16.0
}

/// Normal-mode splitting at zero detuning, `2·sqrt(g² - (γ_c-γ_x)²/16)`.
/// The stored exciton energy is ignored.
pub fn vacuum_rabi_splitting(p: &SystemParams) -> Result<Energy> {
    if !is_strongly_coupled(p) {
        return Err(Error::invalid("no real splitting: system is not strongly coupled"));
    }
    let g = p.coupling.uev();
    let d = p.gamma_c.uev() - p.gamma_x.uev();
    Ok(Energy::from_uev(2.0 * (g * g - d * d / 16.0).sqrt()))
}

/// Inverse of [`vacuum_rabi_splitting`]: `g = sqrt((S/2)² + (γ_c-γ_x)²/16)`.
pub fn coupling_from_splitting(splitting: Energy, gamma_c: Energy, gamma_x: Energy) -> Energy {
    let h = 0.5 * splitting.uev();
    let d = gamma_c.uev() - gamma_x.uev();
    Energy::from_uev((h * h + d * d / 16.0).sqrt())
}

/// FWHM of the (upper, lower) normal modes.
pub fn branch_linewidths(p: &SystemParams) -> (Energy, Energy) {
    let pair = eigen_energies(p);
    (pair.upper.fwhm(), pair.lower.fwhm())
}

/// The normal mode that carries the larger exciton weight.
pub fn exciton_like_mode(p: &SystemParams) -> Result<NormalMode> {
    let pair = eigen_energies(p);
    let (wu, wl) = (pair.upper.exciton_weight(), pair.lower.exciton_weight());
    let degenerate = (wu - wl).abs() <= 1e-12
        || (p.detuning().uev() == 0.0 && is_strongly_coupled(p));
    if degenerate {
        return Err(Error::invalid("branches degenerate in width: exciton-like branch is ambiguous"));
    }
    Ok(if wu > wl { pair.upper } else { pair.lower })
}

/// Population lifetime `ħ / FWHM` of the exciton-like normal mode.
pub fn exciton_branch_lifetime(p: &SystemParams) -> Result<Duration> {
    let mode = exciton_like_mode(p)?;
    Ok(Duration::from_ps(HBAR_UEV_PS / mode.fwhm().uev()))
}

/// Bare exciton lifetime `τ_x` that reproduces a measured exciton-like branch
/// lifetime at detuning `detuning`. Bracketed bisection over `γ_x ∈ (0, γ_c)`.
pub fn infer_bare_lifetime(
    measured: Duration,
    detuning: Energy,
    coupling: Energy,
    gamma_c: Energy,
) -> Result<Duration> {
    measured.require_lifetime()?;
    gamma_c.require_linewidth("gamma_c")?;
    if !(detuning.is_finite() && coupling.is_finite() && coupling.uev() >= 0.0) {
        return Err(Error::invalid("detuning and coupling must be finite, coupling >= 0"));
    }
    let target = HBAR_UEV_PS / measured.ps();
    let width_at = |gx: f64| -> Result<f64> {
        let p = SystemParams::with_detuning(
            Energy::ZERO,
            detuning,
            Energy::from_uev(gx),
            gamma_c,
            coupling,
        )?;
        Ok(exciton_like_mode(&p)?.fwhm().uev())
    };
    let gc = gamma_c.uev();
    let mut lo = gc * 1e-12;
    let mut hi = gc * (1.0 - 1e-12);
    let (f_lo, f_hi) = (width_at(lo)? - target, width_at(hi)? - target);
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(Error::invalid(format!(
            "no bare exciton linewidth in (0, γ_c) reproduces a {measured} branch lifetime"
        )));
    }
    while (hi - lo) > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if width_at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Duration::from_ps(HBAR_UEV_PS / (0.5 * (lo + hi))))
}

/// Purcell factor, quantum efficiency and strong-coupling summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiguresOfMerit {
    pub purcell: f64,
    pub efficiency: f64,
    /// Zero when the system is not strongly coupled.
    pub rabi_splitting: Energy,
    pub strongly_coupled: bool,
}

/// `F_P = 4g²/(γ_c γ_x)` and `η = F_P/(1+F_P) · γ_c/(γ_c+γ_x)`.
pub fn figures_of_merit(coupling: Energy, gamma_c: Energy, gamma_x: Energy) -> Result<FiguresOfMerit> {
    gamma_c.require_linewidth("gamma_c")?;
    gamma_x.require_linewidth("gamma_x")?;
    if !(coupling.is_finite() && coupling.uev() >= 0.0) {
        return Err(Error::invalid("coupling must be >= 0"));
    }
    let (g, gc, gx) = (coupling.uev(), gamma_c.uev(), gamma_x.uev());
    let purcell = 4.0 * g * g / (gc * gx);
    let efficiency = purcell / (1.0 + purcell) * gc / (gc + gx);
    let p = SystemParams::new(Energy::ZERO, Energy::ZERO, gamma_x, gamma_c, coupling)?;
    let strongly_coupled = is_strongly_coupled(&p);
    let rabi_splitting = vacuum_rabi_splitting(&p).unwrap_or(Energy::ZERO);
    Ok(FiguresOfMerit { purcell, efficiency, rabi_splitting, strongly_coupled })
}

/// One grid point of a detuning sweep. `branches` keep their identity along
/// the sweep by adiabatic continuation; use [`CurvePoint::upper`] and
/// [`CurvePoint::lower`] for energy ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub detuning: Energy,
    pub branches: [NormalMode; 2],
}

impl CurvePoint {
    pub fn upper(&self) -> &NormalMode {
        if self.branches[0].energy.re >= self.branches[1].energy.re {
            &self.branches[0]
        } else {
            &self.branches[1]
        }
    }

    pub fn lower(&self) -> &NormalMode {
        if self.branches[0].energy.re >= self.branches[1].energy.re {
            &self.branches[1]
        } else {
            &self.branches[0]
        }
    }

    pub fn splitting(&self) -> Energy {
        Energy::from_uev(self.upper().energy.re - self.lower().energy.re)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnticrossingCurve {
    pub points: Vec<CurvePoint>,
}

impl AnticrossingCurve {
    /// Smallest center separation along the curve.
    pub fn min_splitting(&self) -> Option<(Energy, Energy)> {
        self.points
            .iter()
            .map(|pt| (pt.detuning, pt.splitting()))
            .min_by(|a, b| a.1.uev().total_cmp(&b.1.uev()))
    }
}

/// `|<a|b>|` for normalized 2-vectors.
fn overlap(a: &Vector2<Complex64>, b: &Vector2<Complex64>) -> f64 {
    (a[0].conj() * b[0] + a[1].conj() * b[1]).norm()
}

/// Pairs the current modes with the previous ones by maximum eigenvector
/// overlap; falls back to energy ordering on ties.
pub(crate) fn continue_branches(prev: &[NormalMode; 2], upper: NormalMode, lower: NormalMode) -> [NormalMode; 2] {
    let keep = overlap(&prev[0].vector, &upper.vector) + overlap(&prev[1].vector, &lower.vector);
    let swap = overlap(&prev[0].vector, &lower.vector) + overlap(&prev[1].vector, &upper.vector);
    if swap > keep + 1e-12 {
        [lower, upper]
    } else {
        [upper, lower]
    }
}

/// Eigen-energies along a detuning grid (cavity held fixed).
pub fn detuning_sweep(p: &SystemParams, grid: &[Energy]) -> Result<AnticrossingCurve> {
    if grid.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("detuning grid must be finite"));
    }
    let mut points: Vec<CurvePoint> = Vec::with_capacity(grid.len());
    for &delta in grid {
        let pair = eigen_energies(&p.at_detuning(delta));
        let branches = match points.last() {
            None => [pair.upper, pair.lower],
            Some(prev) => continue_branches(&prev.branches, pair.upper, pair.lower),
        };
        points.push(CurvePoint { detuning: delta, branches });
    }
    Ok(AnticrossingCurve { points })
}

/// Which bare mode is excited before emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialExcitation {
    ExcitonExcited,
    CavityFed,
}

impl InitialExcitation {
    fn vector(self) -> Vector2<Complex64> {
        let (one, zero) = (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
        match self {
            InitialExcitation::ExcitonExcited => Vector2::new(one, zero),
            InitialExcitation::CavityFed => Vector2::new(zero, one),
        }
    }
}

/// A normalized sum of Lorentzian lines in energy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LineShape {
    /// `(mode, weight)`; weights sum to one.
    pub lines: Vec<(ComplexEnergy, f64)>,
}

impl LineShape {
    /// Spectral density per µeV.
    pub fn density(&self, energy: Energy) -> f64 {
        let e = energy.uev();
        self.lines
            .iter()
            .map(|(m, w)| {
                let hw = m.im.abs();
                w * hw / std::f64::consts::PI / ((e - m.re).powi(2) + hw * hw)
            })
            .sum()
    }

    /// Integrated weight below `energy`.
    pub fn cumulative(&self, energy: Energy) -> f64 {
        let e = energy.uev();
        self.lines
            .iter()
            .map(|(m, w)| w * (0.5 + ((e - m.re) / m.im.abs()).atan() / std::f64::consts::PI))
            .sum()
    }
}

/// Two-Lorentzian emission model: one line per normal mode, weighted by the
/// squared overlap of the initial excitation with the normalized eigenvector.
pub fn model_lineshape(p: &SystemParams, initial: InitialExcitation) -> LineShape {
    let pair = eigen_energies(p);
    let init = initial.vector();
    let degenerate = (pair.upper.energy.re - pair.lower.energy.re).abs() <= 1e-9 * p.gamma_c.uev()
        && (pair.upper.energy.im - pair.lower.energy.im).abs() <= 1e-9 * p.gamma_c.uev();
    if degenerate {
        return LineShape { lines: vec![(pair.upper.energy, 1.0)] };
    }
    let wu = overlap(&pair.upper.vector, &init).powi(2);
    let wl = overlap(&pair.lower.vector, &init).powi(2);
    let total = wu + wl;
    LineShape {
        lines: vec![(pair.upper.energy, wu / total), (pair.lower.energy, wl / total)]
            .into_iter()
            .filter(|(_, w)| *w > 0.0)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::lifetime_to_linewidth;
    use approx::assert_relative_eq;

    fn ev(x: f64) -> Energy {
        Energy::from_uev(x)
    }

    fn pillar(delta: f64) -> SystemParams {
        let gx = lifetime_to_linewidth(Duration::from_ps(700.0)).unwrap();
        SystemParams::with_detuning(ev(1.324e6), ev(delta), gx, ev(85.0), ev(35.0)).unwrap()
    }

    #[test]
    fn decoupled_limit_recovers_bare_modes() {
        let p = SystemParams::with_detuning(ev(1000.0), ev(40.0), ev(2.0), ev(80.0), ev(0.0)).unwrap();
        let pair = eigen_energies(&p);
        assert_relative_eq!(pair.upper.energy.re, 1040.0, epsilon = 1e-9);
        assert_relative_eq!(pair.upper.fwhm().uev(), 2.0, epsilon = 1e-9);
        assert_relative_eq!(pair.lower.energy.re, 1000.0, epsilon = 1e-9);
        assert_relative_eq!(pair.lower.fwhm().uev(), 80.0, epsilon = 1e-9);
        assert_eq!(pair.upper.character(), BranchCharacter::ExcitonLike);
        assert_eq!(pair.lower.character(), BranchCharacter::CavityLike);
        assert_eq!(branch_linewidths(&p), (ev(2.0), ev(80.0)));
    }

    #[test]
    fn resonance_splitting_and_widths() {
        let p = pillar(0.0);
        let pair = eigen_energies(&p);
        let s = pair.splitting().uev();
        assert!((s - 55.98).abs() < 0.02, "{s}");
        assert_relative_eq!(s, vacuum_rabi_splitting(&p).unwrap().uev(), max_relative = 1e-9);
        let (wu, wl) = branch_linewidths(&p);
        let expect = (85.0 + p.gamma_x.uev()) / 2.0;
        assert_relative_eq!(wu.uev(), expect, max_relative = 1e-9);
        assert_relative_eq!(wl.uev(), expect, max_relative = 1e-9);
        assert!((expect - 42.97).abs() < 0.01);
    }

    #[test]
    fn strong_coupling_classification() {
        let p = pillar(0.0);
        assert!(is_strongly_coupled(&p));
        assert!((p.coupling.uev() / p.gamma_c.uev() - 0.41).abs() < 0.005);
        let weak = SystemParams { coupling: ev(0.0), ..p };
        assert!(!is_strongly_coupled(&weak));
        assert!(vacuum_rabi_splitting(&weak).is_err());
        let edge = SystemParams { coupling: ev((85.0 - 1.0) / 4.0), gamma_x: ev(1.0), ..p };
        assert!(!is_strongly_coupled(&edge));
    }

    #[test]
    fn equal_linewidths_split_by_twice_g() {
        let p = SystemParams::new(ev(0.0), ev(0.0), ev(30.0), ev(30.0), ev(12.0)).unwrap();
        assert_relative_eq!(vacuum_rabi_splitting(&p).unwrap().uev(), 24.0, max_relative = 1e-12);
    }

    #[test]
    fn splitting_inversion_round_trip() {
        let g = coupling_from_splitting(ev(56.0), ev(85.0), ev(1.0));
        assert_relative_eq!(g.uev(), 35.0, max_relative = 1e-12);
        let p = SystemParams::new(ev(0.0), ev(0.0), ev(1.0), ev(85.0), g).unwrap();
        assert_relative_eq!(vacuum_rabi_splitting(&p).unwrap().uev(), 56.0, max_relative = 1e-12);
    }

    #[test]
    fn linewidth_sum_rule_holds_off_resonance() {
        for delta in [-3000.0, -200.0, -10.0, 0.0, 5.0, 77.0, 990.0] {
            let (a, b) = branch_linewidths(&pillar(delta));
            assert_relative_eq!(a.uev() + b.uev(), 85.0 + pillar(0.0).gamma_x.uev(), max_relative = 1e-9);
        }
    }

    #[test]
    fn exciton_like_width_grows_toward_resonance() {
        let mut last = 0.0;
        for delta in [-2000.0, -1000.0, -500.0, -250.0, -120.0, -60.0, -30.0] {
            let w = exciton_like_mode(&pillar(delta)).unwrap().fwhm().uev();
            assert!(w > last, "width {w} at {delta}");
            last = w;
        }
    }

    #[test]
    fn off_resonant_branch_lifetime() {
        let tau = exciton_branch_lifetime(&pillar(993.0)).unwrap().ps();
        assert!((tau - 630.0).abs() < 2.0, "{tau}");
        assert!(exciton_branch_lifetime(&pillar(0.0)).is_err());
    }

    #[test]
    fn decoupled_branch_lifetime_is_bare() {
        let p = SystemParams { coupling: ev(0.0), ..pillar(300.0) };
        let tau = exciton_branch_lifetime(&p).unwrap().ps();
        assert_relative_eq!(tau, 700.0, max_relative = 1e-9);
        let far = exciton_branch_lifetime(&pillar(1.0e7)).unwrap().ps();
        assert_relative_eq!(far, 700.0, max_relative = 1e-6);
    }

    #[test]
    fn bare_lifetime_inversion() {
        let tau = infer_bare_lifetime(Duration::from_ps(620.0), ev(993.0), ev(35.0), ev(85.0)).unwrap();
        let back = exciton_branch_lifetime(&SystemParams {
            gamma_x: lifetime_to_linewidth(tau).unwrap(),
            ..pillar(993.0)
        })
        .unwrap();
        assert_relative_eq!(back.ps(), 620.0, max_relative = 1e-9);
        let same = infer_bare_lifetime(Duration::from_ps(620.0), ev(993.0), ev(0.0), ev(85.0)).unwrap();
        assert_relative_eq!(same.ps(), 620.0, max_relative = 1e-9);
        // a branch faster than the cavity itself has no solution
        assert!(infer_bare_lifetime(Duration::from_ps(1.0), ev(993.0), ev(35.0), ev(85.0)).is_err());
    }

    #[test]
    fn figures_of_merit_for_pillar() {
        let gx = lifetime_to_linewidth(Duration::from_ps(700.0)).unwrap();
        let fom = figures_of_merit(ev(35.0), ev(85.0), gx).unwrap();
        assert!((fom.purcell - 61.3).abs() < 0.05, "{}", fom.purcell);
        assert!((fom.efficiency - 0.973).abs() < 5e-4, "{}", fom.efficiency);
        assert!(fom.strongly_coupled);
        let none = figures_of_merit(ev(0.0), ev(85.0), gx).unwrap();
        assert_eq!(none.purcell, 0.0);
        assert_eq!(none.efficiency, 0.0);
        assert!(!none.strongly_coupled);
        assert_eq!(none.rabi_splitting, Energy::ZERO);
    }

    #[test]
    fn sweep_is_symmetric_with_branch_exchange() {
        let p = pillar(0.0);
        let grid: Vec<Energy> = (-40..=40).map(|i| ev(i as f64 * 10.0)).collect();
        let curve = detuning_sweep(&p, &grid).unwrap();
        let n = curve.points.len();
        for i in 0..n {
            let (a, b) = (&curve.points[i], &curve.points[n - 1 - i]);
            assert_relative_eq!(a.splitting().uev(), b.splitting().uev(), max_relative = 1e-9);
            assert_relative_eq!(a.upper().fwhm().uev(), b.lower().fwhm().uev(), max_relative = 1e-9);
        }
        let (d, s) = curve.min_splitting().unwrap();
        assert_eq!(d.uev(), 0.0);
        assert_relative_eq!(s.uev(), vacuum_rabi_splitting(&p).unwrap().uev(), max_relative = 1e-9);
    }

    #[test]
    fn weak_coupling_sweep_follows_exciton_through_crossing() {
        let p = SystemParams::new(ev(0.0), ev(0.0), ev(1.0), ev(85.0), ev(5.0)).unwrap();
        let grid: Vec<Energy> = (-30..=30).map(|i| ev(i as f64 * 20.0)).collect();
        let curve = detuning_sweep(&p, &grid).unwrap();
        let first = curve.points[0].branches[0].exciton_weight() > 0.5;
        for pt in &curve.points {
            if pt.detuning.uev() != 0.0 {
                assert_eq!(pt.branches[0].exciton_weight() > 0.5, first);
            }
        }
    }

    #[test]
    fn lineshape_limits() {
        let p = SystemParams::new(ev(100.0), ev(0.0), ev(1.0), ev(85.0), ev(0.0)).unwrap();
        let ls = model_lineshape(&p, InitialExcitation::ExcitonExcited);
        assert_eq!(ls.lines.len(), 1);
        assert_relative_eq!(ls.lines[0].0.re, 100.0);
        let ls = model_lineshape(&pillar(0.0), InitialExcitation::ExcitonExcited);
        assert_eq!(ls.lines.len(), 2);
        assert_relative_eq!(ls.lines[0].1, 0.5, max_relative = 1e-9);
    }

    #[test]
    fn resonance_lineshape_has_central_dip() {
        let p = pillar(0.0);
        let ls = model_lineshape(&p, InitialExcitation::ExcitonExcited);
        let c = p.cavity.uev();
        let peak = (0..2000)
            .map(|i| ls.density(ev(c + i as f64 * 0.05)))
            .fold(0.0, f64::max);
        assert!(ls.density(ev(c)) < 0.8 * peak);
    }

    #[test]
    fn lineshape_has_unit_area() {
        let ls = model_lineshape(&pillar(40.0), InitialExcitation::CavityFed);
        let c = 1.324e6;
        // log-spaced grid out to ±1e9 µeV around the lines
        let mut xs: Vec<f64> = Vec::new();
        let n = 40_000;
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            xs.push(1e-3 * (1e12f64).powf(t));
        }
        let mut grid: Vec<f64> = xs.iter().rev().map(|x| c - x).collect();
        grid.push(c);
        grid.extend(xs.iter().map(|x| c + x));
        let area: f64 = grid
            .windows(2)
            .map(|w| 0.5 * (w[1] - w[0]) * (ls.density(ev(w[0])) + ls.density(ev(w[1]))))
            .sum();
        assert!((area - 1.0).abs() < 1e-6, "{area}");
        assert_relative_eq!(ls.cumulative(ev(f64::INFINITY)), 1.0);
    }
}
