#![no_main]

use coattendwg::data::{parse_config, render_config};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(src) {
        assert_eq!(parse_config(&render_config(&cfg)).expect("rendered config parses"), cfg);
    }
});
