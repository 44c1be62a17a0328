#![no_main]

use std::path::Path;

use accinv::corpus::CorpusManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = CorpusManifest::parse(text, Path::new("/fuzz"), "fuzz") {
            // Whatever parses must render and parse back to the same records.
            let out = m.render(Path::new("/fuzz/corpus.manifest"));
            let again = CorpusManifest::parse(&out, Path::new("/fuzz"), "fuzz").expect("rendered manifest parses");
            assert_eq!(again, m);
        }
    }
});
