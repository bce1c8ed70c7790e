#![no_main]
use gson_core::runner::BatchManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(manifest) = BatchManifest::from_json_str(text) {
            let _ = manifest.jobs(std::path::Path::new("/nonexistent"));
        }
    }
});
