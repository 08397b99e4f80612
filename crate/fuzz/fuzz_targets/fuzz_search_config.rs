#![no_main]

use libfuzzer_sys::fuzz_target;

use lhd::toysearch::SearchConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(config) = serde_json::from_str::<SearchConfig>(text) else {
        return;
    };
    if config.validate().is_err() {
        return;
    }
    let round: SearchConfig =
        serde_json::from_str(&serde_json::to_string(&config).unwrap()).unwrap();
    assert_eq!(round, config);
});
