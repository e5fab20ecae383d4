#![no_main]

use libfuzzer_sys::fuzz_target;
use sbs_core::parse_scheduler_list;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(kinds) = parse_scheduler_list(s) {
        let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
        assert_eq!(parse_scheduler_list(&names.join(",")), Ok(kinds));
    }
});
