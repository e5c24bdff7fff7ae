#![no_main]

use libfuzzer_sys::fuzz_target;
use spde_amplitude::BilinearTensor;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(tensor) = BilinearTensor::parse_text(text, None) else {
        return;
    };
    let again =
        BilinearTensor::parse_text(&tensor.to_text(), Some(tensor.n())).expect("own output parses");
    assert_eq!(again.to_text(), tensor.to_text());
});
