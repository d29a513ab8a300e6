#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = vfa::dataio::parse_keypoints(text, &[1.0, 1.0]);
        let _ = vfa::dataio::parse_keypoints(text, &[1.0, 1.0, 1.0]);
    }
});
