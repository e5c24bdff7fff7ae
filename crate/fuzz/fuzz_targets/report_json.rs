#![no_main]

use libfuzzer_sys::fuzz_target;
use spde_amplitude::report::{CoefficientReport, ExperimentReport};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(r) = ExperimentReport::from_json(text) {
        let _ = r.to_csv();
        let out = r.to_json().expect("report serializes");
        ExperimentReport::from_json(&out).expect("own output parses");
    }
    if let Ok(r) = CoefficientReport::from_json(text) {
        let out = r.to_json().expect("report serializes");
        CoefficientReport::from_json(&out).expect("own output parses");
    }
});
