#![no_main]
use gson_core::runner::EpisodeLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(log) = EpisodeLog::from_jsonl(text) {
            let again = EpisodeLog::from_jsonl(&log.to_jsonl()).expect("round trip");
            assert_eq!(again.to_jsonl(), log.to_jsonl());
        }
    }
});
