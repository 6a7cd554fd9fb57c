#![no_main]

use libfuzzer_sys::fuzz_target;
use nested_grassmann::io::{landmarks_to_string, parse_landmarks};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = parse_landmarks(text) {
        assert_eq!(parse_landmarks(&landmarks_to_string(&parsed)).expect("written landmarks parse"), parsed);
    }
});
