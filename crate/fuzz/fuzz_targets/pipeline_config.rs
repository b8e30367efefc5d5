#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use urbanvit::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = PipelineConfig::parse(text, Path::new("/nonexistent"), &[]);
});
