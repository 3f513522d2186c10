#![no_main]

use std::path::Path;

use crackseg::data::parse_labels;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_labels(text, Path::new("fuzz"));
    }
});
