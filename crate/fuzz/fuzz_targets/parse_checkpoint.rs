#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = vfa::dataio::parse_checkpoint(data) {
        // Small architectures only; a header can legally describe a huge model.
        let ex = &ckpt.config.extractor;
        let small = ex.channels.len() <= 6
            && ex.channels.iter().chain([&ex.match_channels]).all(|&c| c <= 64)
            && ex.kernel <= 7;
        if small {
            let _ = ckpt.into_model::<f32>();
        }
    }
});
