#![no_main]

use libfuzzer_sys::fuzz_target;
use urbanvit::eval::Dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = Dataset::parse_csv(text, |name| name == "activity_density");
});
