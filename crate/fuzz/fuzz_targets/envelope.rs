#![no_main]

use libfuzzer_sys::fuzz_target;
use weightsym::netmodels::Envelope;

fuzz_target!(|data: &[u8]| {
    if let Ok(env) = Envelope::from_json(data) {
        let again = Envelope::from_json(env.to_json().as_bytes()).expect("re-encoded envelope decodes");
        assert_eq!(again.to_json(), env.to_json());
    }
});
