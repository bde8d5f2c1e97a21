#![no_main]

use libfuzzer_sys::fuzz_target;
use platevi::flows::checkpoint::{decode, encode_entries};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode(data) {
        let bytes = encode_entries(entries.iter().map(|(k, v)| (k.as_str(), v)));
        let again = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.len(), entries.len());
        assert_eq!(
            encode_entries(again.iter().map(|(k, v)| (k.as_str(), v))),
            bytes
        );
    }
});
