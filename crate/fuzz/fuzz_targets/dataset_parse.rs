#![no_main]

use coattendwg::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = Dataset::parse(src) {
        ds.validate().expect("parsed dataset validates");
        let again = Dataset::parse(&ds.to_text()).expect("rendered dataset parses");
        assert_eq!(again, ds);
    }
});
