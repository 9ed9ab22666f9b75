#![no_main]

use hbmodal::io::{format_record, parse_record};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(th) = parse_record(text) {
        // whatever parses must survive a write/read cycle unchanged
        let again = parse_record(&format_record(&th)).expect("formatted record parses");
        assert_eq!(again, th);
    }
});
