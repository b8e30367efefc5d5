#![no_main]

use libfuzzer_sys::fuzz_target;
use urbanvit::raster::AssignmentTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(t) = AssignmentTable::parse_csv(text) {
        let once = t.to_csv();
        let again = AssignmentTable::parse_csv(&once).expect("serialized assignments parse");
        assert_eq!(once, again.to_csv());
    }
});
