#![no_main]

use libfuzzer_sys::fuzz_target;
use predlab::data::y4m;

fuzz_target!(|data: &[u8]| {
    if let Ok(video) = y4m::decode(data) {
        let (h, w) = video.dims();
        assert!(video.frames.iter().all(|f| f.dims() == (h, w)));
        assert_eq!(y4m::decode(&y4m::encode(&video)).unwrap().frames, video.frames);
    }
});
