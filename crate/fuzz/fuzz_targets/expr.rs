#![no_main]

use libfuzzer_sys::fuzz_target;
use platevi::model::Expr;

fuzz_target!(|data: &[u8]| {
    if let Ok(src) = std::str::from_utf8(data) {
        if let Ok(e) = Expr::parse(src) {
            let shown = e.to_string();
            let again = Expr::parse(&shown).expect("printed expression parses");
            assert_eq!(again.to_string(), shown);
        }
    }
});
