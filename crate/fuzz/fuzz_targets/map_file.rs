#![no_main]
use gson_core::world::parse_map;
use libfuzzer_sys::fuzz_target;

// Input layout: sidecar JSON, a NUL byte, then the encoded image.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else {
        return;
    };
    let Ok(meta) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    if let Ok(map) = parse_map(meta, &data[split + 1..]) {
        assert!(map.width() > 0 && map.height() > 0);
    }
});
