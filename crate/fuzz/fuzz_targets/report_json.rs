#![no_main]

use libfuzzer_sys::fuzz_target;
use urbanvit::eval::EvalReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = EvalReport::from_json(text);
    let _ = urbanvit::pipeline::render_report(text);
});
