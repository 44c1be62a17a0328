#![no_main]

use accinv::report::{parse_curves, parse_delimited, render_delimited, render_text_table};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_delimited(text, "fuzz") {
            let _ = render_text_table(&entries);
            let _ = parse_delimited(&render_delimited(&entries), "fuzz");
        }
        let _ = parse_curves(text, "fuzz");
    }
});
