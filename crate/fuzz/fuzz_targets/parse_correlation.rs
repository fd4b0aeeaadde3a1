#![no_main]

use fa_precoder::channel::parse_correlation;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_correlation(text);
    }
});
