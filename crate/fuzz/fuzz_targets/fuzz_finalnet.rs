#![no_main]

use libfuzzer_sys::fuzz_target;

use lhd::discretize::{is_valid, reprune};
use lhd::space::Finalnet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(finalnet) = Finalnet::from_json(text) else {
        return;
    };
    let _ = is_valid(&finalnet);
    let again = reprune(&finalnet);
    again.validate().expect("repruning preserves validity");
    assert_eq!(reprune(&again), again, "repruning reaches a fixpoint");
    let round = Finalnet::from_json(&finalnet.to_json()).expect("round trip parses");
    assert_eq!(round, finalnet);
});
