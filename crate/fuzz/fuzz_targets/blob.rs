#![no_main]

use fpad_core::models::{decode_blob, encode_blob};
use libfuzzer_sys::fuzz_target;

// first two bytes: expected element count
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let numel = usize::from(u16::from_le_bytes([data[0], data[1]]));
    let body = &data[2..];
    if let Ok(values) = decode_blob("fuzz", body, numel) {
        assert_eq!(values.len(), numel);
        assert_eq!(encode_blob(&values), body);
    }
});
