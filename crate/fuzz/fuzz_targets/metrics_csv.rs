#![no_main]

use libfuzzer_sys::fuzz_target;
use weightsym::metanet::{read_history_csv, read_metrics_csv, write_metrics_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(Some(rows)) = read_metrics_csv(data) {
        let mut out = Vec::new();
        write_metrics_csv(&rows, &mut out).expect("rows re-encode");
    }
    let _ = read_history_csv(data);
});
