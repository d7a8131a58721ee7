#![no_main]

use libfuzzer_sys::fuzz_target;
use vgan::config::{apply_overrides, parse_override, parse_run_config};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let overrides: Vec<String> = text.lines().map(str::to_string).collect();
    for o in &overrides {
        let _ = parse_override(o);
    }
    if let Ok(cfg) = apply_overrides("seed = 1\n", &overrides) {
        let _ = parse_run_config(&cfg);
    }
});
