//! Time-refinement checks on the shipped benchmark.

use std::path::PathBuf;

use thin_channels::geometry::Q;
use thin_channels::harness::config::parse_config;
use thin_channels::harness::study::micro_problem;
use thin_channels::microsim::MicroState;

/// Largest per-step consistency defect of the mass balance over `[0, T]`.
fn max_consistency(dt: f64) -> f64 {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/b1.json");
    let cfg = parse_config(&std::fs::read_to_string(path).unwrap()).unwrap();
    let p = micro_problem(&cfg, Q::new(1, 4)).unwrap();
    let stepper = p.stepper(dt).unwrap();
    let mut s = MicroState {
        step: 0,
        t: 0.0,
        u: p.initial_field(&cfg.init).unwrap(),
    };
    let mut worst: f64 = 0.0;
    for _ in 0..(cfg.final_time / dt).round() as usize {
        let next = stepper.step(&s).unwrap();
        let r = stepper.mass_report(&s, &next).unwrap();
        assert!(r.residual <= 1e-10 * r.before.abs());
        worst = worst.max(r.consistency);
        s = next;
    }
    worst
}

#[test]
fn mass_balance_defect_is_second_order_per_step() {
    let coarse = max_consistency(1.0 / 64.0);
    let fine = max_consistency(1.0 / 128.0);
    let ratio = coarse / fine;
    assert!(ratio >= 3.0, "defects {coarse:e}, {fine:e}, ratio {ratio}");
}
