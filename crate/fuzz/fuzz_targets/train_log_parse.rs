#![no_main]

use accinv::report::curve_from_log;
use accinv::training::parse_log_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        for line in text.lines() {
            let _ = parse_log_line(line);
        }
        let _ = curve_from_log("fuzz", text);
    }
});
