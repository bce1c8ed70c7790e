#![no_main]
use gson_core::world::ScenarioConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ScenarioConfig::from_json_str(text) {
            let again = serde_json::to_string(&cfg).expect("serializable");
            ScenarioConfig::from_json_str(&again).expect("round trip");
        }
    }
});
