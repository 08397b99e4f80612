//! Finite-difference verification of every update rule's tape gradients and
//! the saturated-mixture equivalence between supernet and discrete forwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lhd::space::{CellGenotype, OpKind, PolicyId, Selection, SpaceFamily};
use lhd::toysearch::net::{forward_discrete, forward_supernet, ArchNodes, ForwardCfg, ToyNet};
use lhd::toysearch::tape::{Matrix, Tape};
use lhd::toysearch::task::ToyTask;
use lhd::toysearch::{toy_space, Method, SearchConfig, ToyDims, ToySearch, TOY_CLASSES, TOY_DIM};

#[test]
fn update_rule_gradients_match_central_differences() {
    let methods: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|&m| m != Method::Random)
        .collect();
    let mut worst_seen = 0.0f64;
    let mut worst_label = String::new();
    for instance in 0usize..100 {
        let method = methods[instance % methods.len()];
        let policy = if instance % 3 == 2 {
            PolicyId::Original
        } else {
            PolicyId::Base
        };
        let mut cfg = SearchConfig::toy(method);
        cfg.batch_size = 8;
        let epochs = cfg.epochs;
        let spec = toy_space(policy);
        let dims = ToyDims {
            d: TOY_DIM,
            n_classes: TOY_CLASSES,
        };
        let task = ToyTask::generate(dims.d, dims.n_classes, 32, 32, 100 + instance as u64);
        let mut search =
            ToySearch::new(method, cfg, spec, dims, task, 7 + instance as u64).unwrap();
        let epoch = (instance / methods.len()) * (epochs.max(2) - 1) / 9;
        let err = search
            .gradient_check(epoch, 12, 1e-5, instance as u64)
            .unwrap();
        assert!(
            err < 1e-5,
            "{method}/{policy} instance {instance}: worst grad err {err}"
        );
        if err > worst_seen {
            worst_seen = err;
            worst_label = format!("{method}/{policy}");
        }
    }
    println!("worst relative error {worst_seen:.3e} at {worst_label}");
}

fn saturated_lhd_arch(
    tape: &mut Tape,
    spec: &lhd::space::SpaceSpec,
    cell: &CellGenotype,
) -> ArchNodes {
    let mut node_weights = Vec::new();
    for v in spec.intermediate_nodes() {
        let mut logits = Matrix::zeros(1, spec.n_pairs(v));
        for s in cell.selections.iter().filter(|s| s.dst() == v) {
            logits.data[spec.pair_index(s.src(), spec.op_index(s.op()).unwrap())] = 200.0;
        }
        let l = tape.leaf(logits);
        node_weights.push(tape.softmax_rows(l));
    }
    let n = spec.n_intermediate;
    let ssb = {
        let mut m = Matrix::zeros(1, n);
        for (j, v) in spec.intermediate_nodes().enumerate() {
            m.data[j] = if cell.ssb.contains(&v) { 200.0 } else { 0.0 };
        }
        if cell.ssb.len() > 1 {
            panic!("saturated ssb needs at most one kept path");
        }
        let l = tape.leaf(m);
        tape.softmax_rows(l)
    };
    let csb = {
        let mut m = Matrix::zeros(1, n);
        for (j, v) in spec.intermediate_nodes().enumerate() {
            m.data[j] = if cell.csb.contains(&v) { 50.0 } else { -50.0 };
        }
        let l = tape.leaf(m);
        tape.sigmoid(l)
    };
    ArchNodes {
        node_weights,
        paths: None,
        ssb: Some(ssb),
        csb: Some(csb),
    }
}

#[test]
fn saturated_one_hot_forward_matches_discrete_forward() {
    let spec = toy_space(PolicyId::Base);
    let dims = ToyDims { d: 6, n_classes: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for round in 0u64..20 {
        let net = ToyNet::init(&spec, dims, &mut rng).unwrap();
        let x = Matrix::randn(4, dims.d, 1.0, &mut rng);
        let ops = spec.ops();
        let selections: Vec<Selection> = spec
            .intermediate_nodes()
            .map(|v| {
                let src = rng.random_range(0..v);
                let op = ops[rng.random_range(0..ops.len())];
                Selection(v, src, op)
            })
            .collect();
        let nodes: Vec<usize> = spec.intermediate_nodes().collect();
        let ssb = vec![nodes[rng.random_range(0..nodes.len())]];
        let csb: Vec<usize> = nodes
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < 0.5)
            .collect();
        let cell = CellGenotype {
            selections,
            ssb,
            csb,
        };

        let mut tape = Tape::new();
        let net_nodes = net.leaves(&mut tape);
        let arch = saturated_lhd_arch(&mut tape, &spec, &cell);
        let xb = tape.leaf(x.clone());
        let cont = forward_supernet(
            &mut tape,
            &net_nodes,
            &arch,
            &spec,
            dims,
            xb,
            &ForwardCfg::default(),
        )
        .unwrap();
        let cont_logits = tape.value(cont.logits).clone();

        let mut tape2 = Tape::new();
        let net_nodes2 = net.leaves(&mut tape2);
        let xb2 = tape2.leaf(x);
        let disc = forward_discrete(&mut tape2, &net_nodes2, &cell, &[], &spec, dims, xb2).unwrap();
        let disc_logits = tape2.value(disc).clone();

        let max_diff = cont_logits
            .data
            .iter()
            .zip(&disc_logits.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "round {round}: max diff {max_diff}");
    }
}

#[test]
fn per_edge_one_hot_matches_dense_discrete_forward() {
    let spec = toy_space(PolicyId::Original);
    assert_eq!(spec.family, SpaceFamily::Dss);
    let dims = ToyDims { d: 5, n_classes: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for round in 0u64..10 {
        let net = ToyNet::init(&spec, dims, &mut rng).unwrap();
        let x = Matrix::randn(3, dims.d, 1.0, &mut rng);
        let ops = spec.ops();
        let mut selections: Vec<Selection> = Vec::new();
        let mut chosen: Vec<Vec<OpKind>> = Vec::new();
        for v in spec.intermediate_nodes() {
            let mut per_edge = Vec::new();
            for src in 0..v {
                let op = ops[rng.random_range(0..ops.len())];
                selections.push(Selection(v, src, op));
                per_edge.push(op);
            }
            chosen.push(per_edge);
        }
        let cell = CellGenotype {
            selections,
            ssb: vec![],
            csb: vec![],
        };

        let mut tape = Tape::new();
        let net_nodes = net.leaves(&mut tape);
        let mut node_weights = Vec::new();
        for (row, v) in spec.intermediate_nodes().enumerate() {
            let mut logits = Matrix::zeros(1, spec.n_pairs(v));
            for (src, &op) in chosen[row].iter().enumerate() {
                logits.data[spec.pair_index(src, spec.op_index(op).unwrap())] = 200.0;
            }
            let l = tape.leaf(logits);
            node_weights.push(tape.softmax_chunks(l, spec.n_ops));
        }
        let arch = ArchNodes {
            node_weights,
            paths: None,
            ssb: None,
            csb: None,
        };
        let xb = tape.leaf(x.clone());
        let cont = forward_supernet(
            &mut tape,
            &net_nodes,
            &arch,
            &spec,
            dims,
            xb,
            &ForwardCfg::default(),
        )
        .unwrap();
        let cont_logits = tape.value(cont.logits).clone();

        let mut tape2 = Tape::new();
        let net_nodes2 = net.leaves(&mut tape2);
        let xb2 = tape2.leaf(x);
        let disc = forward_discrete(&mut tape2, &net_nodes2, &cell, &[], &spec, dims, xb2).unwrap();
        let disc_logits = tape2.value(disc).clone();

        let max_diff = cont_logits
            .data
            .iter()
            .zip(&disc_logits.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "round {round}: max diff {max_diff}");
    }
}
