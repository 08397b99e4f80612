//! Exact cardinality of the continuous supernets and of the valid
//! discretized spaces, with a brute-force enumeration oracle for small
//! instances.
//!
//! Counts treat graph-isomorphic genotypes as distinct and do not identify
//! genotypes that prune to the same finalnet. Valid counts follow the
//! printed closed forms: each output block of the searched family keeps a
//! nonempty proper subset of its paths (sizes 1 through N-1), although the
//! inclusive threshold rule can in principle keep all N; the mismatch is
//! deliberate and documented at the formula site.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::Serialize;

use crate::discretize::{OutputRule, Policy};
use crate::space::{PolicyId, SpaceFamily, SpaceSpec, N_INPUTS};
use crate::{LhdError, Result};

/// Exact nonnegative count.
pub type BigCount = BigUint;

/// Binomial coefficient C(n, k) by the multiplicative rule; 0 when k > n.
pub fn binomial(n: u64, k: u64) -> BigCount {
    if k > n {
        return BigCount::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigCount::one();
    for i in 1..=k {
        acc = acc * BigCount::from(n - k + i) / BigCount::from(i);
    }
    acc
}

/// Continuous DAG count for one cell, taking the edge count directly. Each
/// compound edge holds an arbitrary subset of the M ops; the classic family
/// excludes the empty subset per edge.
pub fn continuous_cell_count(family: SpaceFamily, n_ops: usize, n_edges: usize) -> BigCount {
    let two = BigCount::from(2u32);
    match family {
        SpaceFamily::Lhd => two.pow((n_ops * n_edges) as u32),
        SpaceFamily::Dss => {
            let per_edge = two.pow(n_ops as u32) - BigCount::one();
            per_edge.pow(n_edges as u32)
        }
    }
}

/// Continuous DAG count of the whole space: the per-cell count raised to
/// the number of searched cell kinds.
pub fn continuous_complexity(spec: &SpaceSpec) -> Result<BigCount> {
    spec.validate()?;
    let cell = continuous_cell_count(spec.family, spec.n_ops, spec.n_edges());
    Ok(cell.pow(spec.cell_kinds.len() as u32))
}

/// Number of output-block configurations for one searched cell: both blocks
/// keep a nonempty proper subset of the N paths.
fn output_factor(n: usize) -> BigCount {
    let n64 = n as u64;
    let mut sum = BigCount::zero();
    for i in 1..n64 {
        sum += binomial(n64, i);
    }
    &sum * &sum
}

/// Valid discretized count for one cell, parameterized directly by the
/// per-node op count and the output rule.
pub fn valid_cell_count_with(
    spec: &SpaceSpec,
    op_top_k: usize,
    rule: OutputRule,
) -> Result<BigCount> {
    spec.validate()?;
    let m = spec.n_ops as u64;
    let k = op_top_k as u64;
    match rule {
        OutputRule::Dense => {
            let mut acc = BigCount::one();
            for node in spec.intermediate_nodes() {
                let p = spec.pred_count(node) as u64;
                acc *= binomial(p, 2) * BigCount::from(m * m);
            }
            Ok(acc)
        }
        rule => {
            if k == 0 || k > 2 * m {
                return Err(LhdError::InvalidCount(format!(
                    "top-{k} selection needs between 1 and {} pairs on the first node",
                    2 * m
                )));
            }
            let mut ops = BigCount::one();
            for node in spec.intermediate_nodes() {
                let pairs = spec.n_pairs(node) as u64;
                ops *= binomial(pairs, k);
            }
            let outputs = match rule {
                OutputRule::Threshold => output_factor(spec.n_intermediate),
                OutputRule::TopFour => {
                    let c = binomial(spec.n_intermediate as u64, 4);
                    &c * &c
                }
                OutputRule::Dense => unreachable!(),
            };
            Ok(outputs * ops)
        }
    }
}

/// Valid discretized count for one cell under a named policy.
pub fn valid_cell_count(spec: &SpaceSpec, policy: PolicyId) -> Result<BigCount> {
    let policy = Policy::resolve(policy, spec)?;
    valid_cell_count_with(spec, policy.op_top_k, policy.outputs)
}

/// Valid discretized count of the whole space: per-cell count raised to the
/// number of searched cell kinds.
pub fn valid_complexity(spec: &SpaceSpec, policy: PolicyId) -> Result<BigCount> {
    let cell = valid_cell_count(spec, policy)?;
    Ok(cell.pow(spec.cell_kinds.len() as u32))
}

/// Base-10 logarithm of an exact count; negative infinity for zero.
pub fn log10_of(count: &BigCount) -> f64 {
    if count.is_zero() {
        return f64::NEG_INFINITY;
    }
    let digits = count.to_string();
    let lead_len = digits.len().min(17);
    let lead: f64 = digits[..lead_len].parse().expect("decimal digits");
    lead.log10() + (digits.len() - lead_len) as f64
}

/// Digit count plus log10, the summary printed by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct CountSummary {
    pub digits: usize,
    pub log10: f64,
}

pub fn summarize(count: &BigCount) -> CountSummary {
    CountSummary {
        digits: count.to_string().len(),
        log10: log10_of(count),
    }
}

/// One rung of the design-ablation ladder: the exact recomputed count next
/// to the order of magnitude the design discussion claims for it.
#[derive(Debug, Clone, Serialize)]
pub struct AblationStep {
    pub label: String,
    #[serde(serialize_with = "serialize_big")]
    pub count: BigCount,
    pub log10: f64,
    pub claimed_log10: f64,
}

fn serialize_big<S: serde::Serializer>(x: &BigCount, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&x.to_string())
}

/// Recomputes the valid-space growth ladder. Each rung adds one design
/// ingredient on top of the classic four-node space: cross-edge op
/// selection, then searchable dual outputs with removable nodes, then the
/// fifth node.
pub fn ablation_ladder() -> Vec<AblationStep> {
    let dss = SpaceSpec::dss();
    let mut lhd4 = SpaceSpec::lhd();
    lhd4.n_intermediate = 4;
    let lhd5 = SpaceSpec::lhd();

    let step0 = valid_complexity(&dss, PolicyId::Original).expect("dss count");

    let mut cross_edge = BigCount::one();
    for node in lhd4.intermediate_nodes() {
        cross_edge *= binomial(lhd4.n_pairs(node) as u64, 2);
    }
    let step1 = cross_edge.pow(2);

    let step2 = valid_complexity(&lhd4, PolicyId::Base).expect("four-node count");
    let step3 = valid_complexity(&lhd5, PolicyId::Base).expect("five-node count");

    let rows = [
        ("classic per-edge top-2, fixed output", step0, 18.0),
        ("cross-edge top-2, fixed output", step1, 19.0),
        ("searchable dual outputs, removable nodes", step2, 25.0),
        ("fifth intermediate node", step3, 31.0),
    ];
    rows.into_iter()
        .map(|(label, count, claimed_log10)| AblationStep {
            log10: log10_of(&count),
            label: label.to_string(),
            count,
            claimed_log10,
        })
        .collect()
}

/// Exhaustively enumerates the valid discretized genotypes of one cell and
/// counts them, walking every combination of per-node op subsets and output
/// subsets explicitly. Refuses instances beyond ten million genotypes.
pub fn brute_force_cell_count_with(
    spec: &SpaceSpec,
    op_top_k: usize,
    rule: OutputRule,
) -> Result<BigCount> {
    let closed = valid_cell_count_with(spec, op_top_k, rule)?;
    if closed > BigCount::from(10_000_000u64) {
        return Err(LhdError::InvalidCount(format!(
            "instance has {closed} genotypes, beyond the enumeration bound"
        )));
    }
    let mut per_node_choices: Vec<Vec<Vec<usize>>> = Vec::new();
    for node in spec.intermediate_nodes() {
        match rule {
            OutputRule::Dense => {
                let mut choices = Vec::new();
                for e1 in 0..spec.pred_count(node) {
                    for e2 in (e1 + 1)..spec.pred_count(node) {
                        for o1 in 0..spec.n_ops {
                            for o2 in 0..spec.n_ops {
                                choices.push(vec![
                                    spec.pair_index(e1, o1),
                                    spec.pair_index(e2, o2),
                                ]);
                            }
                        }
                    }
                }
                per_node_choices.push(choices);
            }
            _ => {
                per_node_choices.push(combinations(spec.n_pairs(node), op_top_k));
            }
        }
    }
    let output_choices: Vec<(Vec<usize>, Vec<usize>)> = match rule {
        OutputRule::Dense => {
            vec![(vec![], (N_INPUTS..N_INPUTS + spec.n_intermediate).collect())]
        }
        OutputRule::Threshold => {
            let subsets = proper_nonempty_subsets(spec.n_intermediate);
            let mut pairs = Vec::new();
            for a in &subsets {
                for b in &subsets {
                    pairs.push((a.clone(), b.clone()));
                }
            }
            pairs
        }
        OutputRule::TopFour => {
            let subsets: Vec<Vec<usize>> = combinations(spec.n_intermediate, 4);
            let mut pairs = Vec::new();
            for a in &subsets {
                for b in &subsets {
                    pairs.push((a.clone(), b.clone()));
                }
            }
            pairs
        }
    };

    let mut count: u64 = 0;
    let mut odometer = vec![0usize; per_node_choices.len()];
    if per_node_choices.iter().any(|c| c.is_empty()) {
        return Ok(BigCount::zero());
    }
    'outer: loop {
        for _outputs in &output_choices {
            count += 1;
        }
        let mut i = 0;
        loop {
            if i == odometer.len() {
                break 'outer;
            }
            odometer[i] += 1;
            if odometer[i] < per_node_choices[i].len() {
                break;
            }
            odometer[i] = 0;
            i += 1;
        }
    }
    Ok(BigCount::from(count))
}

/// [`brute_force_cell_count_with`] under a named policy.
pub fn brute_force_cell_count(spec: &SpaceSpec, policy: PolicyId) -> Result<BigCount> {
    let resolved = Policy::resolve(policy, spec)?;
    brute_force_cell_count_with(spec, resolved.op_top_k, resolved.outputs)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn proper_nonempty_subsets(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let full = (1usize << n) - 1;
    for mask in 1..full {
        let subset: Vec<usize> = (0..n)
            .filter(|&p| mask & (1 << p) != 0)
            .map(|p| p + N_INPUTS)
            .collect();
        out.push(subset);
    }
    out
}
