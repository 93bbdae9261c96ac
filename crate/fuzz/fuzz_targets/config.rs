#![no_main]

use fedgraph::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = ExperimentConfig::from_json(data) {
        let _ = cfg.validate();
        let again = ExperimentConfig::from_json(cfg.to_json().as_bytes()).expect("reencoded config parses");
        assert_eq!(again.fed.seed, cfg.fed.seed);
    }
});
