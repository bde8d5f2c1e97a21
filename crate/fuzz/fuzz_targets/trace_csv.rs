#![no_main]

use libfuzzer_sys::fuzz_target;
use platevi::trainer::Trace;

fuzz_target!(|data: &[u8]| {
    let Ok(trace) = Trace::read_csv(data) else {
        return;
    };
    let mut first = Vec::new();
    trace.write_csv(&mut first).unwrap();
    let again = Trace::read_csv(first.as_slice()).expect("written trace reads back");
    let mut second = Vec::new();
    again.write_csv(&mut second).unwrap();
    assert_eq!(first, second);
});
