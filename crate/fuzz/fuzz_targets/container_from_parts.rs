#![no_main]

use libfuzzer_sys::fuzz_target;
use toolflow::container::Container;

// Split the input into a manifest and a data blob; parsing must never panic
// and every record read must stay in bounds.
fuzz_target!(|data: &[u8]| {
    let split = data.first().copied().unwrap_or(0) as usize;
    let rest = data.get(1..).unwrap_or(&[]);
    let cut = split.min(rest.len());
    let (manifest, blob) = rest.split_at(cut);
    if let Ok(c) = Container::from_parts(manifest, blob.to_vec()) {
        let names: Vec<String> = c.names().iter().map(|s| s.to_string()).collect();
        for name in names {
            let _ = c.read_f32(&name);
            let _ = c.read_i32(&name);
        }
    }
});
