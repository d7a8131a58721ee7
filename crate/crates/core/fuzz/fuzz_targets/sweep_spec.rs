#![no_main]

use libfuzzer_sys::fuzz_target;
use vgan::config::{parse_sweep_spec, serialize_sweep_spec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = parse_sweep_spec(text) {
        assert_eq!(parse_sweep_spec(&serialize_sweep_spec(&s)).as_ref(), Ok(&s));
    }
});
