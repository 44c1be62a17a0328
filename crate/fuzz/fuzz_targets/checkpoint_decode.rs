#![no_main]

use accinv::model::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data, "fuzz") {
        let bytes = ck.encode();
        assert_eq!(Checkpoint::decode(&bytes, "fuzz").unwrap(), ck);
    }
});
