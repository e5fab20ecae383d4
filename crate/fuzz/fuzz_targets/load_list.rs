#![no_main]

use libfuzzer_sys::fuzz_target;
use sbs_core::parse_load_list;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(loads) = parse_load_list(s) {
        assert!(!loads.is_empty());
        assert!(loads.iter().all(|&l| l.is_finite() && l > 0.0 && l <= 1000.0));
    }
});
