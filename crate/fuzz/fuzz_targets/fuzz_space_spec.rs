#![no_main]

use libfuzzer_sys::fuzz_target;

use lhd::space::{build_supernet, SpaceSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(spec) = serde_json::from_str::<SpaceSpec>(text) else {
        return;
    };
    if spec.validate().is_err() {
        return;
    }
    let graph = build_supernet(&spec).expect("validated specs build");
    assert_eq!(graph.edges.len(), spec.n_edges());
    for node in spec.intermediate_nodes() {
        for flat in 0..spec.n_pairs(node) {
            let (src, op_idx) = spec.pair_of(flat);
            assert_eq!(spec.pair_index(src, op_idx), flat);
        }
    }
    let round: SpaceSpec =
        serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(round, spec);
});
