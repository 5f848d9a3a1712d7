//! Fuzzes the pairing-manifest parser (tab-separated case/file rows).
//! Arbitrary text must parse or error without panicking, with the row
//! cap preventing unbounded memory growth.
#![no_main]

use bigl::data::phantom::parse_pairing_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_pairing_manifest(text);
});
