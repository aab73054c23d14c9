#![no_main]

use coattendwg::data::{parse_trace_csv, write_trace_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_trace_csv(data) {
        let mut out = Vec::new();
        write_trace_csv(&rows, &mut out).unwrap();
        let again = parse_trace_csv(out.as_slice()).expect("written trace parses");
        assert_eq!(again.len(), rows.len());
    }
});
