//! Fuzzes the binary checkpoint container decoder. Decoding arbitrary
//! bytes must either produce a checkpoint or return an error; it must
//! never panic, hang, or over-allocate. Successfully decoded inputs are
//! re-encoded and decoded again to exercise the round-trip path.
#![no_main]

use bigl::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        Checkpoint::decode(&bytes).expect("re-encoded checkpoint must decode");
    }
});
