#![no_main]

use libfuzzer_sys::fuzz_target;
use sbs_core::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml_str(src) {
        // Whatever parses must survive a round trip unchanged.
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).expect("re-parse");
        assert_eq!(cfg, again);
    }
});
