#![no_main]

use coattendwg::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else { return };
    if let Ok(model) = ModelParams::from_json(src) {
        let back = ModelParams::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }
});
