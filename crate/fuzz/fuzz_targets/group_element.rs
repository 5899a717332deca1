#![no_main]

use libfuzzer_sys::fuzz_target;
use weightsym::symmetry::GroupElement;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = GroupElement::deserialize(data) {
        let bytes = g.serialize();
        assert_eq!(GroupElement::deserialize(&bytes).expect("round trip"), g);
    }
});
