#![no_main]

use coattendwg::data::{parse_trace_jsonl, write_trace_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_trace_jsonl(data) {
        let mut out = Vec::new();
        write_trace_jsonl(&rows, &mut out).unwrap();
        let again = parse_trace_jsonl(out.as_slice()).expect("written trace parses");
        assert_eq!(again.len(), rows.len());
    }
});
