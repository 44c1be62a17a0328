#![no_main]

use std::path::Path;

use accinv::corpus::features;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(seq) = features::decode(data, Path::new("fuzz.aipf")) {
        let bytes = features::encode(&seq);
        assert_eq!(features::decode(&bytes, Path::new("fuzz.aipf")).unwrap(), seq);
    }
});
