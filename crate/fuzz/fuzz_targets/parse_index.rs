#![no_main]

use std::path::Path;

use crackseg::data::parse_index;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rows) = parse_index(text, Path::new("fuzz")) else { return };
    // re-serialized rows parse back to the same values
    let mut out = String::new();
    for r in &rows {
        out.push_str(&format!("{}\t{}\t{}", r.path, r.defect_probability.value(), r.cell_type));
        if let Some(m) = &r.module {
            out.push_str(&format!("\t{m}"));
        }
        out.push('\n');
    }
    if rows.iter().all(|r| !r.path.contains(['\t', '\n', '#']) && r.path.trim() == r.path) {
        if let Ok(again) = parse_index(&out, Path::new("fuzz")) {
            assert_eq!(again.len(), rows.len());
        }
    }
});
