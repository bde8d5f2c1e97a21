#![no_main]

use libfuzzer_sys::fuzz_target;
use platevi::model::parse_card_flag;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok((name, n)) = parse_card_flag(s) {
            assert_eq!(parse_card_flag(&format!("{name}={n}")).unwrap(), (name, n));
        }
    }
});
