#![no_main]

use libfuzzer_sys::fuzz_target;
use vgan::config::{parse_run_config, serialize_run_config};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = parse_run_config(text) {
        let again = serialize_run_config(&c);
        assert_eq!(parse_run_config(&again).as_ref(), Ok(&c));
    }
});
