#![no_main]

use accinv::recipe::Recipe;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(r) = Recipe::parse(text, "fuzz", None) {
            // Every reference points at an earlier stage.
            for (i, s) in r.stages.iter().enumerate() {
                for (_, re) in s.references() {
                    assert!(r.stages[..i].iter().any(|p| p.name == re.stage));
                }
            }
        }
    }
});
