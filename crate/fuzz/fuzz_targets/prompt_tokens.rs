//! Fuzzes the token-id prompt file parser.

#![no_main]

use libfuzzer_sys::fuzz_target;

use dlm_core::harness::parse_prompt_tokens;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(tokens) = parse_prompt_tokens(text) {
            assert!(!tokens.is_empty());
        }
    }
});
