#![no_main]

use accinv::config::KvConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = KvConfig::parse(text, "fuzz") {
            assert_eq!(KvConfig::parse(&c.render(), "fuzz").unwrap(), c);
        }
    }
});
