#![no_main]

use libfuzzer_sys::fuzz_target;

use thematic_core::store::{convert_to_plaintext, DocumentKind};

fuzz_target!(|data: &[u8]| {
    let _ = convert_to_plaintext(data, DocumentKind::Pdf);
});
