//! Cross-method consistency on the shipped fixtures: the two splitting
//! measurements must agree with each other and with the configured values.

use atac_sim::manifold::{bare_energies, load_manifold};
use atac_sim::spectroscopy::{
    fringe_frequency, peak_frequency, peak_frequency_lineshape, simulate_ramsey,
    simulate_resonance_scan, MeasureOptions,
};
use atac_sim::units::TAU;

fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn fixtures_load_and_expose_reference_values() {
    let a = load_manifold(fixture("crossing_a.cfg")).unwrap();
    assert_eq!(a.crossings().len(), 1);
    let frame = a.frame("A").unwrap();
    assert_eq!(frame.omega, 13.33210);
    assert_eq!(frame.b0, 1001.4);
    assert_eq!(a.lifetime_tau_ms(), Some(280.0));
    // The weakly bound branch sits 24 MHz below threshold near 1007 G.
    let energies = bare_energies(&a, 1007.4);
    assert_eq!(energies["feshbach"], -24.0);

    let path = load_manifold(fixture("fig1_path.cfg")).unwrap();
    assert_eq!(path.crossings().len(), 11);
    let ids: Vec<&str> = path.crossings().iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids, ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K"]);
    // Target level lands 3.6 GHz below threshold at zero field.
    let energies = bare_energies(&path, 0.0);
    assert_eq!(energies["nu5"], -3600.0);
    // Measured reference rows.
    for (id, split, b0) in
        [("C", 44.756, 845.8), ("E", 2.36, 466.1), ("J", 110.48, 218.8)]
    {
        let c = path.crossing(id).unwrap();
        assert_eq!(c.splitting_min, split);
        assert!((c.b0 - b0).abs() < 1e-6);
    }
}

#[test]
fn resonant_scan_and_ramsey_fringe_agree_on_the_splitting() {
    let m = load_manifold(fixture("crossing_a.cfg")).unwrap();
    let frame = m.frame("A").unwrap();
    let b = frame.b0 + 0.15;
    let true_split = frame.splitting_at_field(b);
    let opts = MeasureOptions::default();

    // Method 1: transfer scan with a weak pi pulse.
    let gap = 0.01 * atac_sim::crossing::transition_moment_braket(&frame.at_field(b)).abs();
    let pulse_ms = atac_sim::dynamics::pi_pulse_us(gap) * 1e-3;
    let grid: Vec<f64> =
        (0..=28).map(|k| true_split - 0.035 + 0.0025 * k as f64).collect();
    let scan = simulate_resonance_scan(&frame, b, pulse_ms, 0.01, &grid, &opts).unwrap();
    let peak = peak_frequency(&scan).unwrap();

    // Method 2: Ramsey fringe at a known blue detuning.
    let detuning = 0.006;
    let holds: Vec<f64> = (0..=70).map(|k| k as f64 * 0.008).collect();
    let rec = simulate_ramsey(
        &frame,
        b,
        true_split + detuning,
        TAU * 0.05,
        &holds,
        None,
        3,
        &opts,
    )
    .unwrap();
    let fringe = fringe_frequency(&rec).unwrap();
    let ramsey_split = rec.f_rf - fringe.freq_mhz;

    let tol = (peak.sigma_mhz.hypot(fringe.sigma_mhz)).max(2e-4);
    assert!(
        (peak.freq_mhz - ramsey_split).abs() <= 3.0 * tol,
        "scan {} vs ramsey {} (tol {tol})",
        peak.freq_mhz,
        ramsey_split
    );
    assert!((peak.freq_mhz - true_split).abs() < 1e-3);
    assert!((ramsey_split - true_split).abs() < 1e-4);
}

#[test]
fn lineshape_fit_agrees_with_parabolic_interpolation() {
    let m = load_manifold(fixture("fig1_path.cfg")).unwrap();
    let frame = m.frame("E").unwrap();
    let gap = 0.01 * atac_sim::crossing::transition_moment_braket(&frame).abs();
    let pulse_ms = atac_sim::dynamics::pi_pulse_us(gap) * 1e-3;
    let grid: Vec<f64> = (0..=30).map(|k| 2.36 - 0.045 + 0.003 * k as f64).collect();
    let scan =
        simulate_resonance_scan(&frame, frame.b0, pulse_ms, 0.01, &grid, &MeasureOptions::default())
            .unwrap();
    let parabolic = peak_frequency(&scan).unwrap();
    let lineshape = peak_frequency_lineshape(&scan).unwrap();
    assert!((parabolic.freq_mhz - 2.36).abs() < 0.01);
    assert!((lineshape.freq_mhz - 2.36).abs() < 0.005);
    assert!((parabolic.freq_mhz - lineshape.freq_mhz).abs() < 0.005);
}
