#![no_main]

use hise_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

// A config that parses and validates must also yield dims, limits and a hash.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::parse(text) else { return };
    if cfg.validate().is_ok() {
        cfg.dims().expect("validated config has dims");
        cfg.limits().expect("validated config has limits");
        let _ = cfg.hash();
    }
});
