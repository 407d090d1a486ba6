#![no_main]

use libfuzzer_sys::fuzz_target;
use toolflow::grounding::GroundingTables;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = GroundingTables::from_kv_text(s);
    }
});
