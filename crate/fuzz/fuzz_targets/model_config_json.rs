//! Fuzzes the strict model-config JSON parser: arbitrary bytes must either
//! parse into a validated config or return an error, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

use dlm_core::model::ModelConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = ModelConfig::from_json_bytes(data) {
        // anything that parses must satisfy its own invariants
        assert!(cfg.vocab_size >= 2);
        assert_eq!(cfg.d_model % cfg.n_heads, 0);
        let _ = cfg.mask_token_id();
    }
});
