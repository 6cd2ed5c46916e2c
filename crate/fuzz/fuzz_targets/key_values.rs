#![no_main]

use libfuzzer_sys::fuzz_target;
use predlab::config::KeyValues;
use predlab::models::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KeyValues::parse(text) {
        assert_eq!(KeyValues::parse(&kv.to_string()).unwrap(), kv);
        let _ = ModelConfig::from_key_values(&kv);
    }
});
