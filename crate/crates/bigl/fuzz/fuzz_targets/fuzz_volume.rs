//! Fuzzes the volume-file decoder. Arbitrary bytes must decode or
//! error without panicking, and the header length fields must never
//! trigger unbounded allocation. Decoded volumes are re-encoded and
//! decoded again to exercise the writer/reader pair.
#![no_main]

use bigl::data::nifti::{encode_volume_f32, encode_volume_u8, parse_volume_bytes, Decoded};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    match parse_volume_bytes(data) {
        Ok(Decoded::F32(vol, spacing)) => {
            if vol.iter().all(|v| v.is_finite()) && spacing_ok(spacing) {
                let bytes = encode_volume_f32(&vol, spacing).expect("decoded volume must encode");
                parse_volume_bytes(&bytes).expect("re-encoded volume must decode");
            }
        }
        Ok(Decoded::Labels(vol, spacing)) => {
            if vol.iter().all(|&v| (0..=255).contains(&v)) && spacing_ok(spacing) {
                let as_u8 = vol.mapv(|v| v as u8);
                let bytes = encode_volume_u8(&as_u8, spacing).expect("decoded labels must encode");
                parse_volume_bytes(&bytes).expect("re-encoded labels must decode");
            }
        }
        Err(_) => {}
    }
});

fn spacing_ok(s: (f64, f64, f64)) -> bool {
    [s.0, s.1, s.2].iter().all(|v| v.is_finite() && *v > 0.0)
}
