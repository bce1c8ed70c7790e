#![no_main]
use gson_core::estimation::{parse_reply, AnnotationEntry, AnnotationPayload};
use gson_core::world::Vec2;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let payload = AnnotationPayload {
        timestamp: 0.0,
        entries: (0..6)
            .map(|id| AnnotationEntry {
                track_id: id,
                position: Vec2::new(id as f64, 0.0),
                velocity: Vec2::new(0.0, 0.0),
            })
            .collect(),
        instructions: String::new(),
    };
    if let Ok(groups) = parse_reply(text, &payload) {
        let mut seen = std::collections::HashSet::new();
        for g in &groups {
            for id in g.member_ids.iter() {
                assert!(*id < 6, "unknown id kept");
                assert!(seen.insert(*id), "id in two groups");
            }
        }
    }
});
