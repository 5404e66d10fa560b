#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let overrides: Vec<String> = text.lines().map(str::to_string).collect();
        let _ = gdp::config::Config::default().with_overrides(&overrides);
    }
});
