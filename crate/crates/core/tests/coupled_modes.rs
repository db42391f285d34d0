use cqed_core::coupled::*;
use cqed_core::dynamics::*;
use cqed_core::trajectory::trajectory_exciton_population;
use cqed_core::units::constants::HBAR_UEV_PS;
use cqed_core::{Duration, Energy, SystemParams};
use nalgebra::{DMatrix, Matrix4};
use num_complex::Complex64;
use proptest::prelude::*;

fn ev(x: f64) -> Energy {
    Energy::from_uev(x)
}

fn params(ex: f64, ec: f64, gx: f64, gc: f64, g: f64) -> SystemParams {
    SystemParams::new(ev(ex), ev(ec), ev(gx), ev(gc), ev(g)).unwrap()
}

fn pillar(delta: f64) -> SystemParams {
    params(1.3e6 + delta, 1.3e6, HBAR_UEV_PS / 700.0, 85.0, 35.0)
}

/// Decaying eigenvalues of the coupled-mode matrix from the real 4×4
/// embedding, highest center first.
fn brute_force(p: &SystemParams) -> Vec<Complex64> {
    let m = p.coupling_matrix();
    let big = Matrix4::from_fn(|i, j| {
        let z = m[(i % 2, j % 2)];
        match (i / 2, j / 2) {
            (0, 0) | (1, 1) => z.re,
            (0, 1) => -z.im,
            _ => z.im,
        }
    });
    let mut v: Vec<Complex64> = big.complex_eigenvalues().iter().copied().filter(|z| z.im < 0.0).collect();
    v.sort_by(|a, b| b.re.total_cmp(&a.re));
    v
}

proptest! {
    #[test]
    fn closed_form_matches_eigensolver(
        ex in -800.0f64..800.0, ec in -800.0f64..800.0,
        gx in 0.01f64..150.0, gc in 0.01f64..150.0, g in 0.0f64..150.0,
    ) {
        let p = params(ex, ec, gx, gc, g);
        let oracle = brute_force(&p);
        prop_assert_eq!(oracle.len(), 2);
        let scale = p.coupling_matrix().iter().map(|z| z.norm()).fold(0.0, f64::max);
        let pair = eigen_energies(&p);
        for (e, o) in [pair.upper.energy, pair.lower.energy].iter().zip(&oracle) {
            prop_assert!((e.to_complex() - o).norm() <= 1e-10 * scale);
        }
    }

    #[test]
    fn linewidths_sum_to_bare_widths(delta in -2000.0f64..2000.0, gx in 0.01f64..100.0, gc in 0.01f64..200.0, g in 0.0f64..100.0) {
        let (a, b) = branch_linewidths(&params(delta, 0.0, gx, gc, g));
        prop_assert!((a.uev() + b.uev() - gx - gc).abs() <= 1e-9 * (gx + gc));
    }

    #[test]
    fn strong_coupling_iff_real_splitting(gx in 0.01f64..100.0, gc in 0.01f64..200.0, g in 0.0f64..100.0) {
        let p = params(0.0, 0.0, gx, gc, g);
        let split = vacuum_rabi_splitting(&p);
        prop_assert_eq!(is_strongly_coupled(&p), matches!(split, Ok(s) if s.uev() > 0.0));
        if let Ok(s) = split {
            // The resonant line centers are separated by exactly this splitting.
            prop_assert!((eigen_energies(&p).splitting().uev() - s.uev()).abs() <= 1e-9 * s.uev().max(1.0));
        }
    }

    #[test]
    fn efficiency_monotone(g in 1.0f64..80.0, gx in 0.1f64..20.0, dg in 0.01f64..5.0) {
        let base = figures_of_merit(ev(g), ev(85.0), ev(gx)).unwrap().efficiency;
        prop_assert!(figures_of_merit(ev(g + dg), ev(85.0), ev(gx)).unwrap().efficiency > base);
        prop_assert!(figures_of_merit(ev(g), ev(85.0), ev(gx + dg)).unwrap().efficiency < base);
    }

    #[test]
    fn bare_lifetime_inverts_branch_lifetime(gx in 0.05f64..60.0, delta in 200.0f64..3000.0) {
        let p = params(delta, 0.0, gx, 85.0, 35.0);
        let branch = exciton_branch_lifetime(&p).unwrap();
        let bare = infer_bare_lifetime(branch, p.detuning(), p.coupling, p.gamma_c).unwrap();
        prop_assert!((bare.ps() / (HBAR_UEV_PS / gx) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn splitting_symmetric_in_detuning(delta in 0.0f64..1500.0) {
        let a = eigen_energies(&pillar(delta)).splitting().uev();
        let b = eigen_energies(&pillar(-delta)).splitting().uev();
        prop_assert!((a - b).abs() <= 1e-7 * a.max(1.0));
    }
}

#[test]
fn resonant_total_excitation_decays_with_the_polariton_envelope() {
    let model = LindbladModel::from_params(&pillar(0.0));
    let cfg = HilbertConfig::new(2).unwrap();
    let ops = Operators::new(cfg);
    let rho0 = density_from_state(&ops.basis_state(InitialExcitation::ExcitonExcited));
    // Sample at full Rabi periods, where the exchange term returns to zero.
    let p = pillar(0.0);
    let period = 2.0 * std::f64::consts::PI * HBAR_UEV_PS / eigen_energies(&p).splitting().uev();
    let times: Vec<f64> = (1..=3).map(|k| k as f64 * period).collect();
    let envelope = 2.0 * HBAR_UEV_PS / (p.gamma_c.uev() + p.gamma_x.uev());
    assert!((envelope - 15.3).abs() < 0.1);
    for (t, rho) in times.iter().zip(evolve(&model, cfg, &rho0, &times).unwrap()) {
        let total = exciton_population(&ops, &rho) + photon_number(&ops, &rho);
        let expected = (-t / envelope).exp();
        assert!((total / expected - 1.0).abs() < 0.05, "t={t}: {total} vs {expected}");
    }
}

#[test]
fn cutoff_doubling_leaves_weak_excitation_observables_unchanged() {
    let model = LindbladModel::from_params(&pillar(40.0)).with_cavity_feed(0.002);
    let times: Vec<f64> = (1..=30).map(|i| i as f64 * 3.0).collect();
    let run = |n| {
        let cfg = HilbertConfig::new(n).unwrap();
        let ops = Operators::new(cfg);
        let rho0 = density_from_state(&ops.basis_state(InitialExcitation::ExcitonExcited));
        evolve(&model, cfg, &rho0, &times)
            .unwrap()
            .iter()
            .map(|r| (exciton_population(&ops, r), photon_number(&ops, r)))
            .collect::<Vec<_>>()
    };
    for (a, b) in run(2).iter().zip(run(4)) {
        assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
    }
    let y2 = photon_yields(&model, HilbertConfig::new(2).unwrap(), InitialExcitation::ExcitonExcited).unwrap();
    let y4 = photon_yields(&model, HilbertConfig::new(4).unwrap(), InitialExcitation::ExcitonExcited).unwrap();
    assert!((y2.0 - y4.0).abs() < 1e-6 && (y2.1 - y4.1).abs() < 1e-6);
}

#[test]
fn density_matrix_stays_hermitian() {
    let model = LindbladModel::from_params(&pillar(-200.0)).with_exciton_pump(1e-3).with_cavity_feed(0.01);
    let cfg = HilbertConfig::new(3).unwrap();
    let ops = Operators::new(cfg);
    let rho0 = density_from_state(&ops.ground_state());
    let times: Vec<f64> = (1..=20).map(|i| i as f64 * 25.0).collect();
    for rho in evolve(&model, cfg, &rho0, &times).unwrap() {
        let skew: DMatrix<Complex64> = &rho - rho.adjoint();
        assert!(skew.norm() < 1e-10);
        assert!((rho.trace().re - 1.0).abs() < 1e-8);
    }
}

#[test]
fn trajectory_average_matches_master_equation() {
    let model = LindbladModel::from_params(&pillar(60.0));
    let cfg = HilbertConfig::new(2).unwrap();
    let ops = Operators::new(cfg);
    let times: Vec<f64> = (1..=12).map(|i| i as f64 * 4.0).collect();
    let rho0 = density_from_state(&ops.basis_state(InitialExcitation::ExcitonExcited));
    let exact: Vec<f64> = evolve(&model, cfg, &rho0, &times).unwrap().iter().map(|r| exciton_population(&ops, r)).collect();
    let mc = trajectory_exciton_population(&model, InitialExcitation::ExcitonExcited, &times, 10_000, 3).unwrap();
    for ((t, e), m) in times.iter().zip(&exact).zip(&mc) {
        assert!((m.mean - e).abs() <= 3.0 * m.std_err.max(1e-4), "t={t}: {} +- {} vs {e}", m.mean, m.std_err);
    }
}

#[test]
fn poissonian_cavity_background_mixes_into_the_correlation() {
    // An independent Poisson flux of fraction ρ lifts g²(0) to
    // (1-ρ)²g_s + 2ρ(1-ρ) + ρ².
    let model = LindbladModel::from_params(&pillar(-566.0)).with_cavity_feed(0.004).with_exciton_pump(1e-4);
    let cfg = HilbertConfig::new(3).unwrap();
    let bare = cw_g2(&model, cfg, DecayChannel::Cavity, &[0.0]).unwrap();
    assert!(bare.g2_zero() < 0.5, "signal g2(0) {}", bare.g2_zero());
    for rho in [0.1, 0.3, 0.5] {
        let background = bare.flux * rho / (1.0 - rho);
        let mixed = cw_g2(&model.with_background(background), cfg, DecayChannel::Cavity, &[0.0]).unwrap();
        let exact = (1.0 - rho).powi(2) * bare.g2_zero() + rho * rho + 2.0 * rho * (1.0 - rho);
        assert!((mixed.g2_zero() - exact).abs() < 1e-9, "rho {rho}: {} vs {exact}", mixed.g2_zero());
    }
}

#[test]
fn cw_correlation_recovers_to_one() {
    let model = LindbladModel::from_params(&pillar(0.0)).with_exciton_pump(1e-4);
    let taus: Vec<f64> = (0..=200).map(|i| i as f64 * 2.0).collect();
    for ch in [DecayChannel::Cavity, DecayChannel::Exciton] {
        let c = cw_g2(&model, HilbertConfig::new(3).unwrap(), ch, &taus).unwrap();
        assert!((c.g2.last().unwrap() - 1.0).abs() < 1e-3);
    }
    let c = cw_g2(&model, HilbertConfig::new(3).unwrap(), DecayChannel::Exciton, &taus).unwrap();
    let t = c.recovery_time().unwrap();
    assert!((10.0..=25.0).contains(&t), "{t}");
}

#[test]
fn detuned_branch_lifetime_round_trip() {
    let p = pillar(993.0);
    let tau = exciton_branch_lifetime(&p).unwrap().ps();
    assert!((615.0..=635.0).contains(&tau), "{tau}");
    let back = infer_bare_lifetime(Duration::from_ps(tau), p.detuning(), p.coupling, p.gamma_c).unwrap().ps();
    assert!((back - 700.0).abs() < 1e-6);
}
