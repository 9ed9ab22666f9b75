#![no_main]

use hbmodal::io::EvidenceRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = EvidenceRecord::from_json(text) {
        let _ = rec.posterior();
        let _ = rec.evidence();
        let json = rec.to_json().expect("record serializes");
        assert_eq!(EvidenceRecord::from_json(&json).expect("canonical JSON parses"), rec);
    }
});
