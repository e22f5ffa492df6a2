#![no_main]

use apg_core::trace::{read_trace_csv, RunTrace, Termination};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(records) = read_trace_csv(text) else { return };
    if records.is_empty() {
        return;
    }
    let trace = RunTrace { records, restart_iters: vec![], termination: Termination::Completed };
    let csv = trace.to_csv_string().unwrap();
    let again = RunTrace { records: read_trace_csv(&csv).unwrap(), ..trace.clone() };
    assert_eq!(again.to_csv_string().unwrap(), csv);
});
