#![no_main]

use crackseg::checkpoint::checkpoint_from_bytes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = checkpoint_from_bytes(data, None);
});
