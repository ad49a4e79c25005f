#![no_main]

use cmml_core::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json_str(text) {
        let back = ExperimentConfig::from_json_str(&cfg.to_json_pretty()).expect("accepted config re-parses");
        assert_eq!(back.hash(), cfg.hash());
    }
});
