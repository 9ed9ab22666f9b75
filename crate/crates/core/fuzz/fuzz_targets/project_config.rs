#![no_main]

use std::path::Path;

use hbmodal::io::ProjectConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ProjectConfig::parse(text, Path::new("/fuzz"));
    }
});
