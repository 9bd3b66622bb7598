#![no_main]

use fpad_cli::config::{parse_config_file, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(flat) = parse_config_file(data) {
        let _ = RunConfig::resolve(Some(&flat), &[]);
    }
});
