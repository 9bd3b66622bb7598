#![no_main]

use fpad_core::synthdata::DatasetIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(index) = DatasetIndex::from_json("/nonexistent", data) {
        let _ = index.counts();
    }
});
