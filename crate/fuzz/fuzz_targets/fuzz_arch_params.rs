#![no_main]

use libfuzzer_sys::fuzz_target;

use lhd::discretize::{discretize, prune_removable};
use lhd::relax::ArchParams;
use lhd::space::{PolicyId, SpaceFamily};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(params) = ArchParams::from_json(text) else {
        return;
    };
    let policies: &[PolicyId] = match params.space.family {
        SpaceFamily::Lhd => &[PolicyId::Base, PolicyId::OneM, PolicyId::ThreeOps],
        SpaceFamily::Dss => &[PolicyId::Original],
    };
    for &policy in policies {
        let Ok(genotype) = discretize(&params, policy) else {
            continue;
        };
        genotype.validate().expect("discretized genotypes validate");
        prune_removable(&genotype)
            .validate()
            .expect("pruned genotypes validate");
    }
});
