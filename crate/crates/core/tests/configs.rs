use std::path::Path;

use sbs_core::ExperimentConfig;

#[test]
fn committed_configs_load_and_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
        assert_eq!(Some(cfg.name.as_str()), path.file_stem().and_then(|s| s.to_str()));
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn nan_check_bound_is_rejected() {
    let src = r#"
[workload]
duration = 1.0
arrival = { kind = "uniform", rate = 2.0 }
prompt = { kind = "constant", value = 5 }
output = { kind = "constant", value = 1 }

[check]
max_mean_ttft = nan
"#;
    let err = ExperimentConfig::from_toml_str(src).unwrap_err().to_string();
    assert!(err.contains("check.max_mean_ttft"), "{err}");
    assert!(err.contains("line 9"), "{err}");
}
