#![no_main]

use std::path::Path;

use crackseg::data::{decode_cell_image, preprocess_pixels};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_cell_image(data, Path::new("fuzz.png")) {
        preprocess_pixels(&img, Path::new("fuzz.png")).unwrap();
    }
});
