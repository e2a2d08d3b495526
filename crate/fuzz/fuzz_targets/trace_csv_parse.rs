#![no_main]

use gateskip::analysis::GateTrace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(trace) = GateTrace::from_csv(text) {
        let csv = trace.to_csv().expect("serialize parsed trace");
        let again = GateTrace::from_csv(&csv).expect("reparse serialized trace");
        assert_eq!(again, trace);
    }
});
