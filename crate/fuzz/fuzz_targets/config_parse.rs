#![no_main]

use libfuzzer_sys::fuzz_target;
use toolflow::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(s) {
            // exercising the typed getters must not panic either
            let _ = cfg.get_f64("train.lr", 1e-3);
            let _ = cfg.get_usize("train.steps", 1);
            let _ = cfg.dataset_config();
            let _ = cfg.model_config();
            let _ = cfg.content_hash();
        }
    }
});
