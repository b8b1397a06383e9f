#![no_main]

use hise_core::config::parse_data_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_data_config(text).map(|cfg| cfg.validate());
    }
});
