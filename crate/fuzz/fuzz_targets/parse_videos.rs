#![no_main]

use hise_core::datamodel::parse_videos;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_videos(text, "videos.jsonl");
    }
});
