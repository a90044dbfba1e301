use gvpj::verification::{run_suite, SuiteConfig};

#[test]
fn default_suite_passes_and_shrunk_tolerances_fail() {
    let cfg = SuiteConfig {
        mc_paths: 10_000,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg);
    for c in &report.checks {
        assert!(c.pass, "{c:?}");
    }
    assert!(report.passed);
    assert!(report.checks.iter().any(|c| c.id == "wiener_hopf_residual"));

    let strict = run_suite(&SuiteConfig {
        tolerance_scale: 1e-20,
        ..cfg
    });
    assert!(!strict.passed);
}
