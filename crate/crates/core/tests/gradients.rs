use card_core::gradcheck::{cases, GradCheckConfig};

const SEEDS: u64 = 20;

#[test]
fn every_case_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    let mut failures = Vec::new();
    for case in cases() {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let report = (case.run)(seed, &cfg).unwrap_or_else(|e| panic!("{}: {e}", case.name));
            worst = worst.max(report.max_rel_error());
        }
        println!("{:<16} max rel err {worst:.3e}", case.name);
        if worst >= cfg.tolerance {
            failures.push((case.name, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
