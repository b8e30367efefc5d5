#![no_main]

use libfuzzer_sys::fuzz_target;
use urbanvit::features;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = features::parse_district_features(text);
});
