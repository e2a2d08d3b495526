#![no_main]

use gateskip::analysis::Heatmap;
use gateskip::model::ModuleKind;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(map) = Heatmap::from_csv(ModuleKind::Attention, text) {
        // NaN cells rule out struct equality; compare serialized forms.
        let csv = map.to_csv().expect("serialize parsed heatmap");
        let again = Heatmap::from_csv(ModuleKind::Attention, &csv).expect("reparse heatmap");
        assert_eq!(again.to_csv().expect("serialize again"), csv);
    }
});
