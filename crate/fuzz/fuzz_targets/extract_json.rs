#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(json) = thematic_core::codec::extract_json(data) {
        let value: serde_json::Value = serde_json::from_str(&json).expect("extracted text is JSON");
        assert!(value.is_object());
    }
});
