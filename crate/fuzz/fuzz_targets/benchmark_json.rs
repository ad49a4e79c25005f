#![no_main]

use cmml_core::bench::Benchmark;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(b) = Benchmark::from_json(text) {
        let back = Benchmark::from_json(&b.to_json()).expect("written benchmark re-parses");
        assert_eq!(back.fingerprint(), b.fingerprint());
    }
});
