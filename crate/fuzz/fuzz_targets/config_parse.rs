#![no_main]

use gateskip::io::config::{parse_entries, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let entries = parse_entries(text);
    if let Ok(cfg) = RunConfig::from_text(text) {
        assert!(entries.is_ok());
        assert!(cfg.validate().is_ok());
    }
});
