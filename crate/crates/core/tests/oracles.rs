use probf::validation::*;

fn show(r: &SuiteReport) {
    println!("{}: {}/{} max error {:e}", r.name, r.passed, r.total, r.max_error);
    for n in &r.notes {
        println!("  {n}");
    }
}

#[test]
fn gp_posterior_matches_dense_oracles() {
    let r = gp_posterior_suite(25, 11, 1e-8);
    show(&r);
    assert!(r.all_passed());
}

#[test]
fn mll_matches_dense_evaluation() {
    let r = mll_suite(25, 12, 1e-9);
    show(&r);
    assert!(r.all_passed());
}

#[test]
fn scalar_projection_matches_interval_oracle() {
    let r = socp_interval_suite(200, 13, 1e-6);
    show(&r);
    assert!(r.all_passed());
}

#[test]
fn planar_projection_matches_grid_search() {
    let r = socp_grid_suite(200, 14, 400);
    show(&r);
    assert!(r.all_passed());
}

#[test]
fn zero_delta_is_mean_projection() {
    let r = delta_zero_suite(100, 15, 1e-8);
    show(&r);
    assert!(r.all_passed());
}

#[test]
fn chance_rate_is_calibrated() {
    let r = chance_suite(20, 16, 100_000);
    show(&r);
    assert!(r.all_passed());
}
