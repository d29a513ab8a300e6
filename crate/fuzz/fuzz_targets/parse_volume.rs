#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = vfa::dataio::parse_volume(data) {
        // Anything accepted must survive a write/read cycle unchanged.
        assert_eq!(vfa::dataio::parse_volume(&v.to_bytes()).unwrap(), v);
    }
});
