#![no_main]

use libfuzzer_sys::fuzz_target;
use urbanvit::features;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(vs) = features::parse_components(text) {
        let once = features::components_to_csv(&vs).expect("parsed components serialize");
        let again = features::parse_components(&once).expect("serialized components parse");
        assert_eq!(once, features::components_to_csv(&again).unwrap());
    }
});
