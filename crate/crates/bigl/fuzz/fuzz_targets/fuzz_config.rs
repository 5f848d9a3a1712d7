//! Fuzzes the training-configuration parser. Arbitrary text must
//! either yield a validated configuration or an error, never a panic.
//! Accepted configurations must survive a serialize/parse round trip.
#![no_main]

use bigl::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config(text) {
        let out = toml::to_string(&cfg).expect("accepted config must serialize");
        parse_config(&out).expect("serialized config must re-parse");
    }
});
