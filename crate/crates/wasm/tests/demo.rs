use latentflow_wasm::{episode_view, stability_view, step_study};

#[test]
fn episode_view_has_plans_for_plannable_ticks() {
    let v = episode_view(3, "mixed").unwrap();
    assert!(!v.ticks.is_empty());
    assert_eq!(v.ticks[0].expert.len(), 6);
    assert!(v.ticks.last().unwrap().expert.is_empty());
    assert_eq!(v.lane_centers.len(), 3);
    assert!(episode_view(3, "nowhere").is_err());
}

#[test]
fn step_study_shows_first_order_convergence_and_convention_gap() {
    let rows = step_study(4).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), [1, 2, 4, 8, 16]);
    assert!(rows[0].ratio.is_none());
    // Euler on dz/ds = z from 1 gives (1 + 1/K)^K
    assert!((rows[0].linear_error - (std::f64::consts::E - 2.0) * 2.0).abs() < 1e-12);
    for r in &rows {
        assert!((r.derivative_fraction - 1.0).abs() < 1e-12);
        let k = r.k as f64;
        assert!((r.literal_fraction - (k + 1.0) / (2.0 * k)).abs() < 1e-12);
    }
}

#[test]
fn stability_view_reports_angles() {
    let v = stability_view("[[1,0],[0,2],[0,0],[0,3]]").unwrap();
    assert_eq!(v.angles.len(), 3);
    assert!((v.angles[0].unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    assert_eq!(v.angles[1], None);
    // the zero step is skipped, so the mean is over two terms: π/2 and 0
    assert!((v.score - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    assert!(stability_view("not json").is_err());
}
