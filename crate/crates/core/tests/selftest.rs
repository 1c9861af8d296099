use diomp::selftest::{run_selftest, SelfTestOptions};

#[test]
fn every_property_holds() {
    let report = run_selftest(&SelfTestOptions::default());
    println!("{report}");
    assert!(report.all_passed(), "{report}");
}

#[test]
fn overlap_fault_is_caught() {
    let report = run_selftest(&SelfTestOptions {
        inject_overlap: true,
    });
    let r = report.get("non-overlap").expect("property present");
    assert!(!r.passed, "injected overlap went unnoticed: {}", r.detail);
}
