#![no_main]

use cmml_core::metrics::{MetricKind, PerformanceMatrix};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = PerformanceMatrix::from_csv(text, MetricKind::Accuracy) {
        let back = PerformanceMatrix::from_csv(&m.to_csv(), MetricKind::Accuracy).expect("written matrix re-parses");
        assert_eq!(back, m);
        let _ = m.report();
    }
});
