#![no_main]

use fpad_core::GrayImage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = GrayImage::decode_png(data) {
        let again = GrayImage::decode_png(&img.encode_png()).expect("re-encoded image decodes");
        assert_eq!(again.to_u8(), img.to_u8());
    }
});
