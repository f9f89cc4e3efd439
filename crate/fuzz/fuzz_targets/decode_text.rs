#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = thematic_core::store::decode_text("fuzz.txt", data);
});
