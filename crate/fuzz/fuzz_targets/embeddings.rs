#![no_main]

use libfuzzer_sys::fuzz_target;
use urbanvit::features;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(zs) = features::parse_embeddings(text) {
        let once = features::embeddings_to_csv(&zs).expect("parsed embeddings serialize");
        let again = features::parse_embeddings(&once).expect("serialized embeddings parse");
        assert_eq!(once, features::embeddings_to_csv(&again).unwrap());
    }
});
