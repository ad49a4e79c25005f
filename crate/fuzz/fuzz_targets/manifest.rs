#![no_main]

use cmml_core::checkpoint::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::from_json(text) {
        assert_eq!(m.config.hash(), m.config_hash);
        assert!(m.tasks.iter().all(|t| !t.file.contains('/')));
    }
});
