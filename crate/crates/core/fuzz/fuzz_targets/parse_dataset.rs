#![no_main]

use libfuzzer_sys::fuzz_target;
use nested_grassmann::io::{dataset_to_string, parse_dataset};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = parse_dataset(text) {
        if let Ok(again) = dataset_to_string(&parsed) {
            assert_eq!(parse_dataset(&again).expect("written datasets parse"), parsed);
        }
    }
});
