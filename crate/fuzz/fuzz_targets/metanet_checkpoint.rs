#![no_main]

use libfuzzer_sys::fuzz_target;
use weightsym::metanet::Metanet;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Metanet::from_json(data) {
        assert_eq!(Metanet::from_json(m.to_json().as_bytes()).expect("round trip"), m);
    }
});
