#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(levels) = thematic_core::analytics::parse_levels(data) {
        assert!(!levels.is_empty());
    }
});
