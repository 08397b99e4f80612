//! Projection of continuous path weights onto discrete genotypes, plus the
//! pruning pass that deletes intermediate nodes stranded by the chosen
//! outputs.
//!
//! Four named policies cover the searched family: `base` and `1m` keep the
//! top 2 ops per node (they differ only in how the resulting net is scaled,
//! not in topology), `3ops` keeps 3, and `4out` keeps 2 ops like `base` but
//! swaps the output thresholds for a top-4 pick in both blocks. The
//! `original` policy reproduces the classic per-edge rule: top 2 ops from
//! distinct predecessor edges and a fixed dense output.
//!
//! Tie-breaking is lexicographic everywhere: lower source, then lower op
//! index, and lower path index for output blocks. Threshold comparisons are
//! inclusive, so a perfectly uniform summed block keeps all of its paths.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::relax::{self, ArchParams};
use crate::space::{
    CellGenotype, Finalnet, Genotype, PolicyId, Selection, SpaceFamily, SpaceSpec, N_INPUTS,
};
use crate::{LhdError, Result};

/// Cap on resampling attempts before a policy is declared unsatisfiable.
pub const RESAMPLE_CAP: usize = 10_000;

/// How a policy picks output paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputRule {
    /// Keep summed paths with weight >= 1/N and concatenated paths with gate
    /// >= the mean gate.
    Threshold,
    /// Keep the top 4 paths of both blocks (five-node spaces only).
    TopFour,
    /// Keep every node in the concatenated output (classic family).
    Dense,
}

/// A policy resolved against a space: how many ops per node survive and how
/// outputs are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Policy {
    pub id: PolicyId,
    pub op_top_k: usize,
    pub outputs: OutputRule,
}

impl Policy {
    /// Resolves a policy id against a space, rejecting mismatched pairs.
    pub fn resolve(id: PolicyId, space: &SpaceSpec) -> Result<Policy> {
        space.validate()?;
        let policy = match id {
            PolicyId::Base | PolicyId::OneM => Policy {
                id,
                op_top_k: 2,
                outputs: OutputRule::Threshold,
            },
            PolicyId::ThreeOps => Policy {
                id,
                op_top_k: 3,
                outputs: OutputRule::Threshold,
            },
            PolicyId::FourOut => Policy {
                id,
                op_top_k: 2,
                outputs: OutputRule::TopFour,
            },
            PolicyId::Original => Policy {
                id,
                op_top_k: 2,
                outputs: OutputRule::Dense,
            },
        };
        match (id, space.family) {
            (PolicyId::Original, SpaceFamily::Dss) => {}
            (PolicyId::Original, other) => {
                return Err(LhdError::InvalidPolicy(format!(
                    "policy 'original' applies to the dss family, not {other}"
                )));
            }
            (_, SpaceFamily::Dss) => {
                return Err(LhdError::InvalidPolicy(format!(
                    "policy '{id}' applies to the lhd family"
                )));
            }
            (_, SpaceFamily::Lhd) => {}
        }
        if policy.outputs == OutputRule::TopFour && space.n_intermediate != 5 {
            return Err(LhdError::InvalidPolicy(format!(
                "policy '4out' keeps 4 of 5 paths and needs n_intermediate = 5, got {}",
                space.n_intermediate
            )));
        }
        let min_pairs = space.n_pairs(N_INPUTS);
        if policy.op_top_k > min_pairs {
            return Err(LhdError::InvalidPolicy(format!(
                "policy keeps {} ops but the first node offers only {} pairs",
                policy.op_top_k, min_pairs
            )));
        }
        Ok(policy)
    }
}

/// Keeps the `k` highest-weighted (source, op) pairs of one node. Ties go to
/// the lower flat pair index, i.e. lower source then lower op.
pub fn select_ops(
    spec: &SpaceSpec,
    node: usize,
    weights: &[f64],
    k: usize,
) -> Result<Vec<Selection>> {
    if k == 0 {
        return Err(LhdError::InvalidPolicy("cannot keep 0 ops per node".into()));
    }
    if !spec.is_intermediate(node) {
        return Err(LhdError::InvalidGenotype(format!(
            "node {node} is not an intermediate node"
        )));
    }
    if weights.len() != spec.n_pairs(node) {
        return Err(LhdError::InvalidArchParams(format!(
            "node {node} has {} pairs, got {} weights",
            spec.n_pairs(node),
            weights.len()
        )));
    }
    if k > weights.len() {
        return Err(LhdError::InvalidPolicy(format!(
            "cannot keep {k} of {} pairs",
            weights.len()
        )));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<Selection> = order[..k]
        .iter()
        .map(|&flat| {
            let (src, op_idx) = spec.pair_of(flat);
            Selection(node, src, spec.ops()[op_idx])
        })
        .collect();
    picked.sort();
    Ok(picked)
}

/// Threshold output rule: summed paths at or above 1/N, concatenated paths
/// at or above the mean gate. Returns 0-based path positions.
pub fn select_outputs_threshold(ssb_w: &[f64], csb_g: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let n = ssb_w.len().max(1) as f64;
    let ssb = ssb_w
        .iter()
        .enumerate()
        .filter(|(_, &w)| w >= 1.0 / n)
        .map(|(i, _)| i)
        .collect();
    let mean = if csb_g.is_empty() {
        0.0
    } else {
        csb_g.iter().sum::<f64>() / csb_g.len() as f64
    };
    let csb = csb_g
        .iter()
        .enumerate()
        .filter(|(_, &g)| g >= mean)
        .map(|(i, _)| i)
        .collect();
    (ssb, csb)
}

/// Top-4 output rule for five-path blocks. Ties go to the lower path index.
pub fn select_outputs_top4(ssb_w: &[f64], csb_g: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if ssb_w.len() != 5 || csb_g.len() != 5 {
        return Err(LhdError::InvalidPolicy(format!(
            "top-4 outputs keep 4 of 5 paths, got blocks of {} and {}",
            ssb_w.len(),
            csb_g.len()
        )));
    }
    Ok((top_k_positions(ssb_w, 4), top_k_positions(csb_g, 4)))
}

fn top_k_positions(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = order[..k.min(order.len())].to_vec();
    kept.sort_unstable();
    kept
}

fn paths_to_nodes(paths: Vec<usize>) -> Vec<usize> {
    paths.into_iter().map(|p| p + N_INPUTS).collect()
}

/// Discretizes one cell's parameters under a policy.
fn discretize_cell(
    spec: &SpaceSpec,
    params: &crate::relax::CellParams,
    policy: &Policy,
) -> Result<CellGenotype> {
    let mut selections = Vec::new();
    for (j, row) in params.node_logits.iter().enumerate() {
        let node = N_INPUTS + j;
        let weights = match policy.outputs {
            OutputRule::Dense => relax::local_softmax(row, spec.n_ops)?,
            _ => relax::input_softmax(row)?,
        };
        if policy.outputs == OutputRule::Dense {
            selections.extend(select_distinct_edges(spec, node, &weights)?);
        } else {
            selections.extend(select_ops(spec, node, &weights, policy.op_top_k)?);
        }
    }
    let (ssb, csb) = match policy.outputs {
        OutputRule::Threshold => {
            let ssb_w = relax::ssb_weights(&params.ssb_logits)?;
            let csb_g = relax::csb_gates(&params.csb_logits);
            select_outputs_threshold(&ssb_w, &csb_g)
        }
        OutputRule::TopFour => {
            let ssb_w = relax::ssb_weights(&params.ssb_logits)?;
            let csb_g = relax::csb_gates(&params.csb_logits);
            select_outputs_top4(&ssb_w, &csb_g)?
        }
        OutputRule::Dense => (Vec::new(), (0..spec.n_intermediate).collect()),
    };
    Ok(CellGenotype {
        selections,
        ssb: paths_to_nodes(ssb),
        csb: paths_to_nodes(csb),
    })
}

/// Classic rule: per node, keep the best op of each predecessor edge, then
/// the two edges whose best ops weigh most. At most one op per edge.
fn select_distinct_edges(
    spec: &SpaceSpec,
    node: usize,
    weights: &[f64],
) -> Result<Vec<Selection>> {
    if weights.len() != spec.n_pairs(node) {
        return Err(LhdError::InvalidArchParams(format!(
            "node {node} has {} pairs, got {} weights",
            spec.n_pairs(node),
            weights.len()
        )));
    }
    let mut best_per_edge: Vec<(usize, usize, f64)> = Vec::new();
    for src in spec.preds_of(node) {
        let base = spec.pair_index(src, 0);
        let chunk = &weights[base..base + spec.n_ops];
        let op_idx = relax::argmax(chunk);
        best_per_edge.push((src, op_idx, chunk[op_idx]));
    }
    best_per_edge.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut picked: Vec<Selection> = best_per_edge
        .iter()
        .take(2)
        .map(|&(src, op_idx, _)| Selection(node, src, spec.ops()[op_idx]))
        .collect();
    picked.sort();
    Ok(picked)
}

/// Applies a policy to architecture parameters, producing an unpruned
/// genotype.
pub fn discretize(arch: &ArchParams, policy_id: PolicyId) -> Result<Genotype> {
    arch.validate()?;
    let policy = Policy::resolve(policy_id, &arch.space)?;
    let mut cells = BTreeMap::new();
    for (&kind, params) in &arch.cells {
        cells.insert(kind, discretize_cell(&arch.space, params, &policy)?);
    }
    Ok(Genotype {
        space: arch.space.clone(),
        policy: policy_id,
        cells,
        seed: None,
    })
}

/// Classic-family discretization: per-edge softmax, top-2 distinct edges per
/// node, dense output. Pruning is a no-op because every node is kept.
pub fn dss_discretize(arch: &ArchParams) -> Result<Finalnet> {
    let genotype = discretize(arch, PolicyId::Original)?;
    Ok(prune_removable(&genotype))
}

/// Deletes intermediate nodes that serve no kept output, iterating two rules
/// to a fixpoint: a node goes if nothing alive consumes it, or if no
/// descendant of it is kept. Selections touching removed nodes are dropped.
pub fn prune_removable(genotype: &Genotype) -> Finalnet {
    let spec = &genotype.space;
    let mut cells = BTreeMap::new();
    let mut removed = Vec::new();
    for (&kind, cell) in &genotype.cells {
        let kept: BTreeSet<usize> = cell.kept_nodes().into_iter().collect();
        let mut alive: BTreeSet<usize> = spec.intermediate_nodes().collect();
        loop {
            let mut dropped = Vec::new();
            for &v in &alive {
                if kept.contains(&v) {
                    continue;
                }
                let consumed = cell.selections.iter().any(|s| {
                    s.src() == v && alive.contains(&s.dst())
                });
                if !consumed {
                    dropped.push(v);
                    continue;
                }
                if !reaches_kept(v, &cell.selections, &alive, &kept) {
                    dropped.push(v);
                }
            }
            if dropped.is_empty() {
                break;
            }
            for v in dropped {
                alive.remove(&v);
            }
        }
        let selections: Vec<Selection> = cell
            .selections
            .iter()
            .filter(|s| {
                alive.contains(&s.dst()) && (s.src() < N_INPUTS || alive.contains(&s.src()))
            })
            .copied()
            .collect();
        for v in spec.intermediate_nodes() {
            if !alive.contains(&v) {
                removed.push((kind, v));
            }
        }
        cells.insert(
            kind,
            CellGenotype {
                selections,
                ssb: cell.ssb.clone(),
                csb: cell.csb.clone(),
            },
        );
    }
    removed.sort();
    Finalnet {
        space: genotype.space.clone(),
        policy: genotype.policy,
        cells,
        removed,
        seed: genotype.seed,
    }
}

fn reaches_kept(
    start: usize,
    selections: &[Selection],
    alive: &BTreeSet<usize>,
    kept: &BTreeSet<usize>,
) -> bool {
    let mut stack = vec![start];
    let mut seen = BTreeSet::new();
    while let Some(v) = stack.pop() {
        if kept.contains(&v) {
            return true;
        }
        if !seen.insert(v) {
            continue;
        }
        for s in selections {
            if s.src() == v && alive.contains(&s.dst()) && !seen.contains(&s.dst()) {
                stack.push(s.dst());
            }
        }
    }
    false
}

/// Re-runs pruning on a finalnet's cells; used to check idempotence.
pub fn reprune(finalnet: &Finalnet) -> Finalnet {
    let genotype = Genotype {
        space: finalnet.space.clone(),
        policy: finalnet.policy,
        cells: finalnet.cells.clone(),
        seed: finalnet.seed,
    };
    let mut again = prune_removable(&genotype);
    let mut removed = finalnet.removed.clone();
    removed.extend(again.removed.iter().copied());
    removed.sort();
    removed.dedup();
    again.removed = removed;
    again
}

/// True when every cell offers a directed path from a cell input to at
/// least one kept output path.
pub fn is_valid(finalnet: &Finalnet) -> bool {
    finalnet.cells.iter().all(|(_, cell)| {
        let kept: BTreeSet<usize> = cell.kept_nodes().into_iter().collect();
        if kept.is_empty() {
            return false;
        }
        let mut reachable: BTreeSet<usize> = (0..N_INPUTS).collect();
        let mut grew = true;
        while grew {
            grew = false;
            for s in &cell.selections {
                if reachable.contains(&s.src()) && reachable.insert(s.dst()) {
                    grew = true;
                }
            }
        }
        kept.iter().any(|k| reachable.contains(k))
    })
}

/// Outcome of random sampling: the finalnet plus how many draws it took.
#[derive(Debug, Clone)]
pub struct SampleStats {
    pub finalnet: Finalnet,
    pub attempts: usize,
}

/// Samples a random valid finalnet under a policy. Op logits come from the
/// initialization distribution; output paths are drawn as independent fair
/// Bernoulli picks (threshold policies) or as a random top-4 (the `4out`
/// policy). Sampling repeats until the pruned net is valid.
pub fn random_genotype_with_stats<R: Rng>(
    spec: &SpaceSpec,
    policy_id: PolicyId,
    rng: &mut R,
) -> Result<SampleStats> {
    let policy = Policy::resolve(policy_id, spec)?;
    for attempt in 1..=RESAMPLE_CAP {
        let arch = ArchParams::init(spec, rng)?;
        let mut genotype = discretize(&arch, policy_id)?;
        if policy.outputs == OutputRule::Threshold {
            for cell in genotype.cells.values_mut() {
                cell.ssb = bernoulli_paths(spec.n_intermediate, rng);
                cell.csb = bernoulli_paths(spec.n_intermediate, rng);
            }
        }
        let finalnet = prune_removable(&genotype);
        if is_valid(&finalnet) {
            return Ok(SampleStats {
                finalnet,
                attempts: attempt,
            });
        }
    }
    Err(LhdError::SearchFailure(format!(
        "no valid finalnet for policy '{policy_id}' within {RESAMPLE_CAP} samples"
    )))
}

fn bernoulli_paths<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n)
        .filter(|_| rng.random::<f64>() < 0.5)
        .map(|p| p + N_INPUTS)
        .collect()
}

/// [`random_genotype_with_stats`] without the attempt count.
pub fn random_genotype<R: Rng>(
    spec: &SpaceSpec,
    policy_id: PolicyId,
    rng: &mut R,
) -> Result<Finalnet> {
    Ok(random_genotype_with_stats(spec, policy_id, rng)?.finalnet)
}
