#![no_main]

use libfuzzer_sys::fuzz_target;
use predlab::data::pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = pgm::decode(data) {
        assert_eq!(frame.pixels.len(), frame.width * frame.height);
        // Re-encoding a decoded frame must decode to the same frame.
        assert_eq!(pgm::decode(&pgm::encode(&frame)).unwrap(), frame);
    }
});
