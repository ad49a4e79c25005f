#![no_main]

use cmml_core::lora::FactorPool;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pool) = FactorPool::from_json(text) {
        let back = FactorPool::from_json(&pool.to_json()).expect("exported pool re-imports");
        assert_eq!(back.a.value(), pool.a.value());
        assert_eq!(back.b.value(), pool.b.value());
    }
});
