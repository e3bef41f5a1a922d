use dualfuse_core::nn::gradsuite::{run_suite, FAMILIES};
use dualfuse_core::nn::GradCheckOptions;

#[test]
fn all_primitives_match_central_differences() {
    let opts = GradCheckOptions::default();
    let results = run_suite(&opts).unwrap();
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<16} {:<20} rel {:.2e} abs {:.2e}", r.family, r.shape, r.report.worst(), r.report.worst_abs());
        if !r.report.passed() {
            failed.push(format!("{} {}: {:?}", r.family, r.shape, r.report.failures().collect::<Vec<_>>()));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
    for fam in FAMILIES {
        assert!(results.iter().filter(|r| r.family == fam).count() >= 3);
    }
}

#[test]
fn step_size_from_dense_example() {
    // coarser step used by the dense example still passes
    let opts = GradCheckOptions { step: 1e-3, ..Default::default() };
    let results = run_suite(&opts).unwrap();
    assert!(results.iter().filter(|r| r.family == "dense").all(|r| r.report.passed()));
}
