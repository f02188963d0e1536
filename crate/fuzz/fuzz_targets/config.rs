#![no_main]
use libfuzzer_sys::fuzz_target;
use shortcut_probe::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = PipelineConfig::parse(text);
    }
});
