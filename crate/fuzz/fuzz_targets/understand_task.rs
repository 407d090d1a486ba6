#![no_main]

use libfuzzer_sys::fuzz_target;
use toolflow::grounding::{understand_task, GroundingTables};
use toolflow::scene::{ObjectInfo, ObjectRegistry, PartInfo};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let registry = ObjectRegistry::new(vec![
        ObjectInfo {
            name: "oven".into(),
            parts: vec![PartInfo { name: "handle".into() }],
            graspable: true,
            hinge: None,
        },
        ObjectInfo {
            name: "cup".into(),
            parts: vec![PartInfo { name: "rim".into() }],
            graspable: true,
            hinge: None,
        },
    ])
    .unwrap();
    let _ = understand_task(s, &registry, &GroundingTables::default());
});
