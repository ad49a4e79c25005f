#![no_main]

use cmml_core::checkpoint::keys_from_json;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(keys) = keys_from_json(text) {
        assert!(keys.beta > 0.0 && keys.beta < 1.0);
        if let Some((_, k)) = keys.keys().next() {
            let q = vec![1.0; k.len()];
            let _ = keys.predict_task(&q);
        }
    }
});
