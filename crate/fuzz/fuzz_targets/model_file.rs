#![no_main]

use libfuzzer_sys::fuzz_target;
use platevi::model::parse_model;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(graph) = parse_model(src) {
        // the normalized form must parse back to itself
        let normal = graph.to_string();
        let again = parse_model(&normal).expect("normalized form parses");
        assert_eq!(again.to_string(), normal);
    }
});
