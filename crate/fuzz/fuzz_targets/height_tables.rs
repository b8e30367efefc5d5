#![no_main]

use libfuzzer_sys::fuzz_target;
use urbanvit::layers::BuildingHeightTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Counts CSV and floors CSV separated by a NUL byte.
    if let Some((counts, floors)) = text.split_once('\0') {
        let _ = BuildingHeightTable::parse(counts, floors);
    }
});
