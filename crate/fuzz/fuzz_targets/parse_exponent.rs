#![no_main]

use crackseg::lp_pooling::{Exponent, PoolingSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(p) = text.parse::<Exponent>() else { return };
    assert!(p.value() >= 1.0);
    assert_eq!(p.label().parse::<Exponent>().unwrap(), p);
    assert!(PoolingSpec::new(p).is_ok());
});
