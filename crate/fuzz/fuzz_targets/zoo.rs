#![no_main]

use libfuzzer_sys::fuzz_target;
use weightsym::zoogen::Zoo;

fuzz_target!(|data: &[u8]| {
    if let Ok(zoo) = Zoo::from_json(data) {
        let text = zoo.to_json();
        assert_eq!(Zoo::from_json(text.as_bytes()).expect("round trip"), zoo);
        let _ = zoo.write_manifest(std::io::sink());
    }
});
