#![no_main]

use libfuzzer_sys::fuzz_target;
use weightsym::metanet::MetanetConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<MetanetConfig>(data) {
        let _ = c.validate();
        let _ = c.hash();
    }
});
