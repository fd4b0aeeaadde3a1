#![no_main]

use fa_precoder::channel::{format_matrix, parse_matrix};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_matrix(text) {
        let again = parse_matrix(&format_matrix(&m).unwrap()).unwrap();
        assert_eq!(m, again);
    }
});
