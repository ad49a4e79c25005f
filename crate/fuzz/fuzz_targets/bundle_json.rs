#![no_main]

use cmml_core::backbone::BackboneConfig;
use cmml_core::checkpoint::bundle_from_json;
use cmml_core::memory::TaskBundle;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rec) = bundle_from_json(text) else { return };
    let cfg = BackboneConfig::default();
    for rank in [1, 2, 4] {
        if let Ok(bundle) = TaskBundle::from_record(rec.clone(), &cfg, rank) {
            assert!(bundle.is_frozen());
            assert_eq!(bundle.to_record().task_id, rec.task_id);
        }
    }
});
