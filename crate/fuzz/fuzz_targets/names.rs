#![no_main]

use libfuzzer_sys::fuzz_target;
use weightsym::zoogen::Task;
use weightsym::Arch;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(a) = Arch::parse(s) {
            assert_eq!(a.name(), s);
        }
        if let Ok(t) = Task::parse(s) {
            assert_eq!(t.name(), s);
        }
    }
});
