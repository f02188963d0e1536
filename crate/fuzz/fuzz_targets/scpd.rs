#![no_main]
use libfuzzer_sys::fuzz_target;
use shortcut_probe::ShortcutDetector;

fuzz_target!(|data: &[u8]| {
    if let Ok(det) = ShortcutDetector::from_bytes(data) {
        assert_eq!(det.to_bytes(), data);
    }
});
