#![no_main]
use libfuzzer_sys::fuzz_target;
use shortcut_probe::LinearHead;

fuzz_target!(|data: &[u8]| {
    if let Ok(head) = LinearHead::from_bytes(data) {
        assert_eq!(head.to_bytes(), data);
    }
});
