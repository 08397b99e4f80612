#![no_main]

use libfuzzer_sys::fuzz_target;

use lhd::discretize::{prune_removable, reprune};
use lhd::space::Genotype;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(genotype) = Genotype::from_json(text) else {
        return;
    };
    let finalnet = prune_removable(&genotype);
    finalnet.validate().expect("pruned nets stay valid");
    assert_eq!(reprune(&finalnet), finalnet, "pruning is idempotent");
    let round = Genotype::from_json(&genotype.to_json()).expect("round trip parses");
    assert_eq!(round, genotype);
});
