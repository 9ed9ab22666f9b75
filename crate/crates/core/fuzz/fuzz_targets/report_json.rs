#![no_main]

use hbmodal::io::{from_json, FusionReport, IdentifyReport, TruthRecord};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = from_json::<FusionReport>(text);
        let _ = from_json::<TruthRecord>(text);
        let _ = from_json::<IdentifyReport>(text);
    }
});
