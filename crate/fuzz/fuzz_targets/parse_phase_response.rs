#![no_main]

use libfuzzer_sys::fuzz_target;

use thematic_core::codec::parse_phase_response;
use thematic_core::Phase;

fuzz_target!(|data: &str| {
    for phase in [Phase::InitialCoding, Phase::Reduction, Phase::Themes] {
        if let Ok(parsed) = parse_phase_response(phase, data) {
            assert_eq!(parse_phase_response(phase, &parsed.to_json()), Ok(parsed));
        }
    }
});
