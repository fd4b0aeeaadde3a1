#![no_main]

use fa_precoder::config::{emit_config, parse_config};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        // emitted configs must be accepted and stable
        let again = parse_config(&emit_config(&cfg)).expect("emitted config parses");
        assert_eq!(cfg, again);
    }
});
