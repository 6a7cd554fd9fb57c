#![no_main]

use libfuzzer_sys::fuzz_target;
use nested_grassmann::io::{model_to_string, parse_model};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = parse_model(text) {
        let again = model_to_string(&parsed).expect("valid models serialize");
        assert_eq!(parse_model(&again).expect("written models parse"), parsed);
    }
});
