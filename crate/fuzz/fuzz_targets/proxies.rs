#![no_main]

use libfuzzer_sys::fuzz_target;
use urbanvit::proxies::{parse_proxies, proxies_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rs) = parse_proxies(text) {
        let once = proxies_to_csv(&rs);
        let again = parse_proxies(&once).expect("serialized proxies parse");
        assert_eq!(once, proxies_to_csv(&again));
    }
});
