#![no_main]

use accinv::decode_eval::{parse_hyps, render_hyps};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(h) = parse_hyps(text, "fuzz") {
            let again = parse_hyps(&render_hyps(&h), "fuzz").expect("rendered hypotheses parse");
            assert_eq!(again.len(), h.len());
        }
    }
});
