//! Property tests for the discretization pipeline: pruning against an
//! independent reachability oracle, shift invariance of the softmax-scoped
//! rules, policy selection counts, and serialization round-trips.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lhd::discretize::{discretize, is_valid, prune_removable, random_genotype, reprune};
use lhd::relax::{self, ArchParams};
use lhd::space::{
    CellGenotype, CellKind, Genotype, PolicyId, Selection, SpaceFamily, SpaceSpec, N_INPUTS,
};

fn spec_for(family: SpaceFamily, n: usize) -> SpaceSpec {
    SpaceSpec {
        family,
        n_intermediate: n,
        n_ops: family.op_menu().len(),
        cell_kinds: vec![CellKind::Normal, CellKind::Reduction],
    }
}

/// Nodes that survive pruning, computed independently of the production
/// fixpoint: a node stays alive iff an output block keeps it or a directed
/// chain of selections leads from it to a kept node. Walks selection edges
/// backwards from the kept set.
fn oracle_alive(spec: &SpaceSpec, cell: &CellGenotype) -> BTreeSet<usize> {
    let mut alive: BTreeSet<usize> = cell.kept_nodes().into_iter().collect();
    let mut frontier: Vec<usize> = alive.iter().copied().collect();
    while let Some(dst) = frontier.pop() {
        for s in &cell.selections {
            if s.dst() == dst && spec.is_intermediate(s.src()) && alive.insert(s.src()) {
                frontier.push(s.src());
            }
        }
    }
    alive
}

fn cell_strategy(family: SpaceFamily, n: usize) -> impl Strategy<Value = CellGenotype> {
    let menu = family.op_menu();
    let selection = (N_INPUTS..N_INPUTS + n)
        .prop_flat_map(move |dst| (Just(dst), 0..dst, 0..menu.len()))
        .prop_map(move |(dst, src, op)| Selection(dst, src, menu[op]));
    (
        prop::collection::btree_set(selection, 0..=3 * n),
        prop::collection::btree_set(N_INPUTS..N_INPUTS + n, 0..=n),
        prop::collection::btree_set(N_INPUTS..N_INPUTS + n, 0..=n),
    )
        .prop_map(|(selections, ssb, csb)| CellGenotype {
            selections: selections.into_iter().collect(),
            ssb: ssb.into_iter().collect(),
            csb: csb.into_iter().collect(),
        })
}

fn genotype_strategy() -> impl Strategy<Value = Genotype> {
    (prop::bool::ANY, 2usize..=5).prop_flat_map(|(classic, n)| {
        let (family, policy) = if classic {
            (SpaceFamily::Dss, PolicyId::Original)
        } else {
            (SpaceFamily::Lhd, PolicyId::Base)
        };
        let spec = spec_for(family, n);
        (cell_strategy(family, n), cell_strategy(family, n)).prop_map(move |(normal, reduce)| {
            let mut cells = BTreeMap::new();
            cells.insert(CellKind::Normal, normal);
            cells.insert(CellKind::Reduction, reduce);
            Genotype {
                space: spec.clone(),
                policy,
                cells,
                seed: None,
            }
        })
    })
}

proptest! {
    #[test]
    fn prune_matches_reachability_oracle(genotype in genotype_strategy()) {
        genotype.validate().unwrap();
        let finalnet = prune_removable(&genotype);
        finalnet.validate().unwrap();
        prop_assert_eq!(&finalnet.space, &genotype.space);
        prop_assert_eq!(finalnet.policy, genotype.policy);

        let mut expected_removed = Vec::new();
        for (&kind, cell) in &genotype.cells {
            let alive = oracle_alive(&genotype.space, cell);
            let expected_selections: Vec<Selection> = cell
                .selections
                .iter()
                .filter(|s| {
                    alive.contains(&s.dst())
                        && (s.src() < N_INPUTS || alive.contains(&s.src()))
                })
                .copied()
                .collect();
            let pruned = &finalnet.cells[&kind];
            prop_assert_eq!(&pruned.selections, &expected_selections);
            prop_assert_eq!(&pruned.ssb, &cell.ssb);
            prop_assert_eq!(&pruned.csb, &cell.csb);
            for node in genotype.space.intermediate_nodes() {
                if !alive.contains(&node) {
                    expected_removed.push((kind, node));
                }
            }
        }
        expected_removed.sort();
        prop_assert_eq!(&finalnet.removed, &expected_removed);
        prop_assert_eq!(&reprune(&finalnet), &finalnet);
    }

    #[test]
    fn every_softmax_scope_sums_to_one_and_ignores_shifts(
        row in prop::collection::vec(-30.0f64..30.0, 2..=42),
        shift in -20.0f64..20.0,
    ) {
        let base = relax::input_softmax(&row).unwrap();
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted_row: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let shifted = relax::input_softmax(&shifted_row).unwrap();
        prop_assert_eq!(relax::argmax(&base), relax::argmax(&shifted));
        for (a, b) in base.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-9);
        }

        let temp = 0.05 + (shift.abs() / 20.0) * 4.0;
        let tempered = relax::tempered_softmax(&row, temp).unwrap();
        prop_assert!((tempered.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let weights = relax::ssb_weights(&row[..row.len().min(8)]).unwrap();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn local_softmax_normalizes_each_edge_chunk(
        chunks in 1usize..=6,
        n_ops in 1usize..=7,
        seed in 0u64..1000,
        shift in -15.0f64..15.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row: Vec<f64> = (0..chunks * n_ops)
            .map(|_| rng.random_range(-10.0..10.0))
            .collect();
        let weights = relax::local_softmax(&row, n_ops).unwrap();
        for chunk in weights.chunks(n_ops) {
            prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let shifted_row: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let shifted = relax::local_softmax(&shifted_row, n_ops).unwrap();
        for (a, b) in weights.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn csb_gates_rise_with_each_logit_independently(
        logits in prop::collection::vec(-10.0f64..10.0, 1..=8),
        pick in 0usize..8,
        delta in 0.01f64..5.0,
    ) {
        let idx = pick % logits.len();
        let gates = relax::csb_gates(&logits);
        let mut bumped = logits.clone();
        bumped[idx] += delta;
        let bumped_gates = relax::csb_gates(&bumped);
        prop_assert!(bumped_gates[idx] > gates[idx]);
        for i in 0..logits.len() {
            if i != idx {
                prop_assert_eq!(bumped_gates[i], gates[i]);
            }
        }
    }
}

#[test]
fn discretization_ignores_uniform_per_node_logit_shifts() {
    let lhd = spec_for(SpaceFamily::Lhd, 5);
    let dss = spec_for(SpaceFamily::Dss, 4);
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = ArchParams::init(&lhd, &mut rng).unwrap();
        let mut shifted = arch.clone();
        for cell in shifted.cells.values_mut() {
            for row in &mut cell.node_logits {
                let c = rng.random_range(-7.0..7.0);
                for x in row.iter_mut() {
                    *x += c;
                }
            }
            let c = rng.random_range(-7.0..7.0);
            for x in &mut cell.ssb_logits {
                *x += c;
            }
        }
        for policy in [PolicyId::Base, PolicyId::ThreeOps] {
            assert_eq!(
                discretize(&arch, policy).unwrap(),
                discretize(&shifted, policy).unwrap(),
                "policy {policy} moved under a uniform logit shift (seed {seed})"
            );
        }

        let mut shifted_all = shifted.clone();
        for cell in shifted_all.cells.values_mut() {
            let c = rng.random_range(-7.0..7.0);
            for x in &mut cell.csb_logits {
                *x += c;
            }
        }
        assert_eq!(
            discretize(&arch, PolicyId::FourOut).unwrap(),
            discretize(&shifted_all, PolicyId::FourOut).unwrap(),
            "top-4 outputs rank gates, so shifting every csb logit must not move them"
        );

        let base = discretize(&arch, PolicyId::Base).unwrap();
        let one_m = discretize(&arch, PolicyId::OneM).unwrap();
        assert_eq!(base.cells, one_m.cells);

        let classic = ArchParams::init(&dss, &mut rng).unwrap();
        let mut classic_shifted = classic.clone();
        for cell in classic_shifted.cells.values_mut() {
            for row in &mut cell.node_logits {
                let c = rng.random_range(-7.0..7.0);
                for x in row.iter_mut() {
                    *x += c;
                }
            }
        }
        assert_eq!(
            discretize(&classic, PolicyId::Original).unwrap(),
            discretize(&classic_shifted, PolicyId::Original).unwrap()
        );
    }
}

#[test]
fn policies_keep_their_advertised_selection_counts_before_pruning() {
    let lhd = spec_for(SpaceFamily::Lhd, 5);
    let dss = spec_for(SpaceFamily::Dss, 4);
    for seed in 0..32u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let arch = ArchParams::init(&lhd, &mut rng).unwrap();
        for (policy, k) in [
            (PolicyId::Base, 2),
            (PolicyId::OneM, 2),
            (PolicyId::ThreeOps, 3),
            (PolicyId::FourOut, 2),
        ] {
            let genotype = discretize(&arch, policy).unwrap();
            for cell in genotype.cells.values() {
                assert!(cell.selections.windows(2).all(|w| w[0] < w[1]));
                for node in lhd.intermediate_nodes() {
                    let picked = cell
                        .selections
                        .iter()
                        .filter(|s| s.dst() == node)
                        .count();
                    assert_eq!(picked, k, "policy {policy}, node {node}");
                }
            }
        }

        let classic = ArchParams::init(&dss, &mut rng).unwrap();
        let genotype = discretize(&classic, PolicyId::Original).unwrap();
        for cell in genotype.cells.values() {
            assert!(cell.ssb.is_empty());
            let dense: Vec<usize> = dss.intermediate_nodes().collect();
            assert_eq!(cell.csb, dense);
            for node in dss.intermediate_nodes() {
                let sources: Vec<usize> = cell
                    .selections
                    .iter()
                    .filter(|s| s.dst() == node)
                    .map(|s| s.src())
                    .collect();
                assert_eq!(sources.len(), 2);
                assert_ne!(sources[0], sources[1]);
            }
        }
    }
}

#[test]
fn four_out_keeps_exactly_four_paths_per_block_after_pruning() {
    let lhd = spec_for(SpaceFamily::Lhd, 5);
    for seed in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let arch = ArchParams::init(&lhd, &mut rng).unwrap();
        let finalnet = prune_removable(&discretize(&arch, PolicyId::FourOut).unwrap());
        assert!(is_valid(&finalnet));
        for cell in finalnet.cells.values() {
            assert_eq!(cell.ssb.len(), 4);
            assert_eq!(cell.csb.len(), 4);
        }
    }
}

#[test]
fn one_empty_output_block_is_tolerated_but_two_are_not() {
    let lhd = spec_for(SpaceFamily::Lhd, 4);
    let menu = SpaceFamily::Lhd.op_menu();
    let cell = |ssb: Vec<usize>, csb: Vec<usize>| CellGenotype {
        selections: vec![Selection(2, 0, menu[0]), Selection(2, 1, menu[1])],
        ssb,
        csb,
    };
    let build = |ssb: Vec<usize>, csb: Vec<usize>| {
        let mut cells = BTreeMap::new();
        cells.insert(CellKind::Normal, cell(ssb.clone(), csb.clone()));
        cells.insert(CellKind::Reduction, cell(ssb, csb));
        Genotype {
            space: lhd.clone(),
            policy: PolicyId::Base,
            cells,
            seed: None,
        }
    };
    assert!(is_valid(&prune_removable(&build(vec![2], vec![]))));
    assert!(is_valid(&prune_removable(&build(vec![], vec![2]))));
    assert!(!is_valid(&prune_removable(&build(vec![], vec![]))));
}

#[test]
fn sampled_finalnets_stay_fixed_under_repruning() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cases = [
        (SpaceFamily::Lhd, 5, PolicyId::Base),
        (SpaceFamily::Lhd, 5, PolicyId::ThreeOps),
        (SpaceFamily::Lhd, 5, PolicyId::FourOut),
        (SpaceFamily::Dss, 4, PolicyId::Original),
    ];
    for (family, n, policy) in cases {
        let spec = spec_for(family, n);
        for _ in 0..500 {
            let finalnet = random_genotype(&spec, policy, &mut rng).unwrap();
            assert!(is_valid(&finalnet));
            assert_eq!(reprune(&finalnet), finalnet);
        }
    }
}

#[test]
fn json_round_trips_preserve_every_artifact_exactly() {
    let lhd = spec_for(SpaceFamily::Lhd, 5);
    for seed in 0..16u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let arch = ArchParams::init(&lhd, &mut rng).unwrap();
        let arch_json = serde_json::to_string(&arch).unwrap();
        assert_eq!(ArchParams::from_json(&arch_json).unwrap(), arch);

        let genotype = discretize(&arch, PolicyId::Base).unwrap();
        assert_eq!(Genotype::from_json(&genotype.to_json()).unwrap(), genotype);

        let finalnet = random_genotype(&lhd, PolicyId::Base, &mut rng).unwrap();
        assert_eq!(
            lhd::space::Finalnet::from_json(&finalnet.to_json()).unwrap(),
            finalnet
        );

        let spec_json = serde_json::to_string(&lhd).unwrap();
        let spec_back: SpaceSpec = serde_json::from_str(&spec_json).unwrap();
        assert_eq!(spec_back, lhd);
    }
}

#[test]
fn pair_indexing_is_a_source_major_bijection() {
    for spec in [spec_for(SpaceFamily::Lhd, 5), spec_for(SpaceFamily::Dss, 4)] {
        let last = N_INPUTS + spec.n_intermediate - 1;
        for node in spec.intermediate_nodes() {
            assert_eq!(spec.n_pairs(node), node * spec.n_ops);
        }
        for flat in 0..spec.n_pairs(last) {
            let (src, op_idx) = spec.pair_of(flat);
            assert!(src < last);
            assert!(op_idx < spec.n_ops);
            assert_eq!(spec.pair_index(src, op_idx), flat);
            assert_eq!(flat, src * spec.n_ops + op_idx);
        }
    }
}
