#![no_main]

use libfuzzer_sys::fuzz_target;
use weightsym::NetParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = NetParams::deserialize(data) {
        let bytes = p.serialize();
        assert_eq!(NetParams::deserialize(&bytes).expect("round trip"), p);
    }
});
