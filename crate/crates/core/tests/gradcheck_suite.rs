use pvnet_core::gradcheck::{run_suite, SuiteOptions};
use pvnet_core::OpKind;

#[test]
fn tiny_suite_passes() {
    let report = run_suite(&SuiteOptions::tiny()).unwrap();
    print!("{}", report.render());
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn corrupted_backward_is_caught() {
    for kind in [OpKind::Sigmoid, OpKind::Conv3d, OpKind::Softmax] {
        let opts = SuiteOptions {
            corrupt: Some(kind),
            ..SuiteOptions::tiny()
        };
        let report = run_suite(&opts).unwrap();
        assert!(!report.passed(), "corrupting {kind} went unnoticed");
    }
}
