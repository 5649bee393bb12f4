//! Fuzzes the experiment-config JSON parser. Parsing must never panic and
//! must never touch the filesystem paths named inside the document.

#![no_main]

use libfuzzer_sys::fuzz_target;

use dlm_core::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = ExperimentConfig::from_json_bytes(data) {
        assert!(cfg.repetitions >= 1);
        assert!(!cfg.policies.is_empty());
        // re-validating a parsed config is always clean
        cfg.validate().unwrap();
    }
});
