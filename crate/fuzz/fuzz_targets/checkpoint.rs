#![no_main]

use hise_core::train::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ckpt) = Checkpoint::from_json(text) {
            let _ = ckpt.validate();
        }
    }
});
