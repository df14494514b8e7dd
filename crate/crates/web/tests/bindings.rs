use prefrobust_web::{coefficient_curve_rs, whittle_explorer_rs, worst_case_rs};

#[test]
fn curve_peaks_at_half_for_small_rho() {
    let c = coefficient_curve_rs(0.1, 1000).unwrap();
    let best = c.chunks(3).max_by(|a, b| a[1].total_cmp(&b[1])).unwrap();
    assert!((best[0] - 0.5).abs() < 1e-9);
    assert_eq!(c.len(), 3 * 1001);
    assert!(coefficient_curve_rs(0.1, 0).is_err());
    assert!(coefficient_curve_rs(-1.0, 10).is_err());
}

#[test]
fn worst_case_moves_toward_larger_loss() {
    // Δ > 0 makes ℓ₋₁ the larger loss, so the adversary pushes p̂ down.
    let v = worst_case_rs(0.5, 0.1, 2.0, 0.25).unwrap();
    assert!(v[0] < 0.5);
    assert!((v[4] - (v[3] + v[5])).abs() < 1e-12);
    assert!(worst_case_rs(1.5, 0.1, 0.0, 0.25).is_err());
}

#[test]
fn explorer_matches_analytic_arm() {
    // engaged state is absorbing under either action; acting from 0 engages
    let out = whittle_explorer_rs(&[0.0, 1.0, 1.0, 1.0], "", "s", 0.5, -1.0, 2.0, 30).unwrap();
    assert!((out[0] - 1.0).abs() < 1e-5 && out[1].abs() < 1e-5);
    assert_eq!(&out[2..4], &[0.0, 1.0]);
    let rows: Vec<&[f64]> = out[4..].chunks(3).collect();
    assert_eq!(rows.len(), 31);
    // gap(0) changes sign at W(0) = 1
    let below = rows.iter().filter(|r| r[0] < 0.99).all(|r| r[1] < 0.0);
    let above = rows.iter().filter(|r| r[0] > 1.01).all(|r| r[1] > 0.0);
    assert!(below && above);
}

#[test]
fn explorer_rejects_bad_input() {
    assert!(whittle_explorer_rs(&[0.1, 0.2, 0.3], "", "s", 0.9, 0.0, 1.0, 4).is_err());
    assert!(whittle_explorer_rs(&[0.1, 0.2, 0.3, 0.4], "nope", "s", 0.9, 0.0, 1.0, 4).is_err());
    assert!(whittle_explorer_rs(&[0.1, 0.2, 0.3, 0.4], "", "s +", 0.9, 0.0, 1.0, 4).is_err());
}
