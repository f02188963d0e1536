#![no_main]
use libfuzzer_sys::fuzz_target;
use shortcut_probe::EmbeddingDataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = EmbeddingDataset::from_bytes(data) {
        assert_eq!(EmbeddingDataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
    }
});
