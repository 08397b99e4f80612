//! Architecture parameters and the continuous relaxations that turn them
//! into path weights.
//!
//! Scope is the load-bearing idea here. The same logits produce different
//! search behavior depending on which set of them one softmax covers:
//!
//! * [`input_softmax`] normalizes over every (source, op) pair entering a
//!   node, so candidates on different edges compete directly.
//! * [`local_softmax`] normalizes each compound edge on its own, the classic
//!   per-edge semantics.
//! * [`path_normalize`] keeps per-edge softmaxes but multiplies in a second
//!   softmax over incoming edges, the partial-channel double normalization.
//!
//! Output blocks use [`ssb_weights`] (softmax over the summed block's paths,
//! exclusive) and [`csb_gates`] (independent sigmoids, non-exclusive; all
//! gates may close). Sampled relaxations ([`gumbel_softmax`],
//! [`dirichlet_sample`]) and [`tempered_softmax`] cover the baselines that
//! perturb or sharpen the distribution.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::space::{CellKind, SpaceSpec};
use crate::{LhdError, Result};

/// Scale applied to standard-normal draws when initializing architecture
/// parameters.
pub const INIT_SCALE: f64 = 1e-3;

/// Nonnegative weights per (source, op) pair, summing to 1 within each
/// normalization scope.
pub type EdgeDistribution = Vec<f64>;

/// Architecture parameters for one cell kind: one logit row per
/// intermediate node (length M * predecessors, ordered source-major) plus
/// one logit per output path for each block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub node_logits: Vec<Vec<f64>>,
    pub ssb_logits: Vec<f64>,
    pub csb_logits: Vec<f64>,
}

/// Architecture parameters for every searched cell kind of a space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub space: SpaceSpec,
    pub cells: BTreeMap<CellKind, CellParams>,
}

impl ArchParams {
    /// Fresh parameters: standard-normal draws scaled by 1e-3.
    pub fn init<R: Rng>(space: &SpaceSpec, rng: &mut R) -> Result<Self> {
        space.validate()?;
        let mut cells = BTreeMap::new();
        for &kind in &space.cell_kinds {
            let node_logits = space
                .intermediate_nodes()
                .map(|node| {
                    (0..space.n_pairs(node))
                        .map(|_| {
                            let z: f64 = rng.sample(StandardNormal);
                            z * INIT_SCALE
                        })
                        .collect()
                })
                .collect();
            let draw = |rng: &mut R| -> Vec<f64> {
                (0..space.n_intermediate)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * INIT_SCALE
                    })
                    .collect()
            };
            cells.insert(
                kind,
                CellParams {
                    node_logits,
                    ssb_logits: draw(rng),
                    csb_logits: draw(rng),
                },
            );
        }
        Ok(ArchParams {
            space: space.clone(),
            cells,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        for &kind in &self.space.cell_kinds {
            let cell = self.cells.get(&kind).ok_or_else(|| {
                LhdError::InvalidArchParams(format!("missing parameters for cell '{kind}'"))
            })?;
            if cell.node_logits.len() != self.space.n_intermediate {
                return Err(LhdError::InvalidArchParams(format!(
                    "cell '{kind}' has {} node rows, space needs {}",
                    cell.node_logits.len(),
                    self.space.n_intermediate
                )));
            }
            for (j, row) in cell.node_logits.iter().enumerate() {
                let node = crate::space::N_INPUTS + j;
                if row.len() != self.space.n_pairs(node) {
                    return Err(LhdError::InvalidArchParams(format!(
                        "node {node} has {} logits, expected {}",
                        row.len(),
                        self.space.n_pairs(node)
                    )));
                }
            }
            for (label, row) in [("ssb", &cell.ssb_logits), ("csb", &cell.csb_logits)] {
                if row.len() != self.space.n_intermediate {
                    return Err(LhdError::InvalidArchParams(format!(
                        "{label} logits have length {}, expected {}",
                        row.len(),
                        self.space.n_intermediate
                    )));
                }
            }
            let all = cell
                .node_logits
                .iter()
                .flatten()
                .chain(&cell.ssb_logits)
                .chain(&cell.csb_logits);
            for &x in all {
                if !x.is_finite() {
                    return Err(LhdError::InvalidArchParams(
                        "logits must be finite".into(),
                    ));
                }
            }
        }
        if self.cells.len() != self.space.cell_kinds.len() {
            return Err(LhdError::InvalidArchParams(
                "parameters present for a cell kind outside the space".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: ArchParams = serde_json::from_str(text)
            .map_err(|e| LhdError::MalformedInput(format!("arch params json: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// Numerically stable softmax over the whole slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One softmax over all (source, op) pairs entering a node.
pub fn input_softmax(node_logits: &[f64]) -> Result<EdgeDistribution> {
    if node_logits.is_empty() {
        return Err(LhdError::InvalidArchParams(
            "input_softmax needs at least one logit".into(),
        ));
    }
    Ok(softmax(node_logits))
}

/// Independent softmax per compound edge. `node_logits` is a node's full
/// source-major row; `n_ops` entries belong to each edge.
pub fn local_softmax(node_logits: &[f64], n_ops: usize) -> Result<EdgeDistribution> {
    if node_logits.is_empty() || n_ops == 0 || node_logits.len() % n_ops != 0 {
        return Err(LhdError::InvalidArchParams(format!(
            "local_softmax needs a nonempty row divisible by n_ops, got {} / {}",
            node_logits.len(),
            n_ops
        )));
    }
    Ok(node_logits
        .chunks(n_ops)
        .flat_map(|chunk| softmax(chunk))
        .collect())
}

/// Per-edge softmax scaled by a second softmax over the node's incoming
/// edges: weight of pair (i, m) is p_i * a_i^m.
pub fn path_normalize(
    node_logits: &[f64],
    path_logits: &[f64],
    n_ops: usize,
) -> Result<EdgeDistribution> {
    let local = local_softmax(node_logits, n_ops)?;
    if path_logits.len() * n_ops != node_logits.len() {
        return Err(LhdError::InvalidArchParams(format!(
            "path_normalize got {} path logits for {} edges",
            path_logits.len(),
            node_logits.len() / n_ops
        )));
    }
    let p = softmax(path_logits);
    Ok(local
        .chunks(n_ops)
        .zip(&p)
        .flat_map(|(chunk, &pe)| chunk.iter().map(move |&a| pe * a))
        .collect())
}

/// Softmax over the summed output block's paths.
pub fn ssb_weights(ssb_logits: &[f64]) -> Result<Vec<f64>> {
    if ssb_logits.is_empty() {
        return Err(LhdError::InvalidArchParams(
            "ssb_weights needs at least one path".into(),
        ));
    }
    Ok(softmax(ssb_logits))
}

/// Independent sigmoid gate per concatenated output path.
pub fn csb_gates(csb_logits: &[f64]) -> Vec<f64> {
    csb_logits.iter().map(|&x| sigmoid(x)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `logits / temp`.
pub fn tempered_softmax(logits: &[f64], temp: f64) -> Result<EdgeDistribution> {
    if temp <= 0.0 {
        return Err(LhdError::InvalidArchParams(format!(
            "temperature must be positive, got {temp}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temp).collect();
    input_softmax(&scaled)
}

/// Straight-through Gumbel sample: returns the softmax of the perturbed,
/// tempered logits together with the argmax index of the perturbed logits.
pub fn gumbel_softmax<R: Rng>(
    logits: &[f64],
    tau: f64,
    rng: &mut R,
) -> Result<(EdgeDistribution, usize)> {
    if tau <= 0.0 {
        return Err(LhdError::InvalidArchParams(format!(
            "gumbel temperature must be positive, got {tau}"
        )));
    }
    if logits.is_empty() {
        return Err(LhdError::InvalidArchParams(
            "gumbel_softmax needs at least one logit".into(),
        ));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .map(|&x| {
            let u: f64 = rng.random::<f64>().max(1e-300);
            x - (-u.ln()).ln()
        })
        .collect();
    let hard = argmax(&perturbed);
    let scaled: Vec<f64> = perturbed.iter().map(|&x| x / tau).collect();
    Ok((softmax(&scaled), hard))
}

/// Dirichlet draw on the simplex via normalized Gamma variates.
pub fn dirichlet_sample<R: Rng>(
    concentration: &[f64],
    rng: &mut R,
) -> Result<EdgeDistribution> {
    if concentration.is_empty() {
        return Err(LhdError::InvalidArchParams(
            "dirichlet_sample needs at least one concentration".into(),
        ));
    }
    let mut draws = Vec::with_capacity(concentration.len());
    for &a in concentration {
        if !(a > 0.0) {
            return Err(LhdError::InvalidArchParams(format!(
                "dirichlet concentrations must be positive, got {a}"
            )));
        }
        let gamma = Gamma::new(a, 1.0).map_err(|e| {
            LhdError::InvalidArchParams(format!("gamma parameterization: {e}"))
        })?;
        let x: f64 = gamma.sample(rng).max(1e-300);
        draws.push(x);
    }
    let sum: f64 = draws.iter().sum();
    Ok(draws.into_iter().map(|x| x / sum).collect())
}

/// Index of the largest entry; earlier index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "got {got:?}, want {want:?}");
        }
    }

    #[test]
    fn input_softmax_uniform_and_saturated() {
        let w = input_softmax(&[0.0; 14]).unwrap();
        assert_close(&w, &[1.0 / 14.0; 14], 1e-12);

        let mut logits = [0.0; 14];
        logits[3] = 1000.0;
        let w = input_softmax(&logits).unwrap();
        assert!(w[3] > 1.0 - 1e-12);
        assert!(w.iter().enumerate().all(|(i, &x)| i == 3 || x < 1e-12));
    }

    #[test]
    fn input_softmax_closed_form() {
        let w = input_softmax(&[0.0, 2f64.ln(), 4f64.ln()]).unwrap();
        assert_close(&w, &[1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], 1e-12);
    }

    #[test]
    fn local_softmax_is_per_edge() {
        let w = local_softmax(&[0.0; 14], 7).unwrap();
        assert_close(&w, &[1.0 / 7.0; 14], 1e-12);

        let row = [0.3, -1.2, 0.3, -1.2];
        let w = local_softmax(&row, 2).unwrap();
        assert_close(&w[..2], &w[2..], 1e-15);

        let e = std::f64::consts::E;
        let w = local_softmax(&[1.0, 2.0], 2).unwrap();
        assert_close(&w, &[1.0 / (1.0 + e), e / (1.0 + e)], 1e-12);
    }

    #[test]
    fn path_normalize_matches_closed_forms() {
        let w = path_normalize(&[0.0; 14], &[0.0, 0.0], 7).unwrap();
        assert_close(&w, &[1.0 / 14.0; 14], 1e-12);

        let w = path_normalize(&[0.0; 14], &[1000.0, 0.0], 7).unwrap();
        assert!(w[..7].iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-9));
        assert!(w[7..].iter().all(|&x| x < 1e-100));

        let w = path_normalize(&[0.0; 14], &[0.0, 3f64.ln()], 7).unwrap();
        assert_close(&w[..7], &[0.25 / 7.0; 7], 1e-12);
        assert_close(&w[7..], &[0.75 / 7.0; 7], 1e-12);
    }

    #[test]
    fn ssb_weights_closed_forms() {
        let w = ssb_weights(&[0.0; 5]).unwrap();
        assert_close(&w, &[0.2; 5], 1e-12);

        let w = ssb_weights(&[0.0, 0.0, 0.0, 0.0, 1e9]).unwrap();
        assert!(w[4] > 1.0 - 1e-12);

        let w = ssb_weights(&[0.0, 0.0, 0.0, 0.0, 4f64.ln()]).unwrap();
        assert_close(&w, &[0.125, 0.125, 0.125, 0.125, 0.5], 1e-12);
    }

    #[test]
    fn csb_gates_closed_forms() {
        assert_close(&csb_gates(&[0.0, 0.0]), &[0.5, 0.5], 1e-15);
        assert_eq!(csb_gates(&[-1e9])[0], 0.0);
        assert_close(&csb_gates(&[3f64.ln()]), &[0.75], 1e-12);

        let mut last = 0.0;
        for i in -50..=50 {
            let g = csb_gates(&[i as f64 * 0.1])[0];
            assert!(g > last);
            last = g;
        }
    }

    #[test]
    fn tempered_softmax_limits() {
        let logits = [0.4, -0.3, 0.9];
        let a = tempered_softmax(&logits, 1.0).unwrap();
        let b = input_softmax(&logits).unwrap();
        assert_close(&a, &b, 1e-15);

        // Adjacent logits sit 0.01/0.0015 = 6.67 nats apart after scaling,
        // leaving exp(-6.67) + exp(-13.3) = 1.274e-3 of leaked mass.
        let sharp = tempered_softmax(&[0.01, 0.02, 0.03], 0.0015).unwrap();
        let leak = (-0.01f64 / 0.0015).exp() + (-0.02f64 / 0.0015).exp();
        assert!((sharp[2] - 1.0 / (1.0 + leak)).abs() < 1e-12);
        assert!(sharp[2] > 0.998 && sharp[2] < 0.999);

        let flat = tempered_softmax(&[5.0, -3.0, 1.0], 1e9).unwrap();
        assert_close(&flat, &[1.0 / 3.0; 3], 1e-6);

        assert!(tempered_softmax(&logits, 0.0).is_err());
    }

    #[test]
    fn gumbel_hard_frequencies_track_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = [0.0, 0.5, -0.25, 1.0, 0.0, -1.0, 0.3];
        let target = softmax(&logits);
        let mut counts = [0usize; 7];
        let draws = 100_000;
        for _ in 0..draws {
            let (soft, hard) = gumbel_softmax(&logits, 0.5, &mut rng).unwrap();
            let sum: f64 = soft.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            counts[hard] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - target[i]).abs() < 0.01,
                "index {i}: freq {freq}, target {}",
                target[i]
            );
        }
    }

    #[test]
    fn gumbel_uniform_frequencies_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 7];
        for _ in 0..100_000 {
            let (_, hard) = gumbel_softmax(&[0.0; 7], 1.0, &mut rng).unwrap();
            counts[hard] += 1;
        }
        for &c in &counts {
            assert!((c as f64 / 100_000.0 - 1.0 / 7.0).abs() < 0.01);
        }

        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            gumbel_softmax(&[0.1, 0.2], 0.7, &mut a).unwrap(),
            gumbel_softmax(&[0.1, 0.2], 0.7, &mut b).unwrap()
        );
        assert!(gumbel_softmax(&[0.1], 0.0, &mut a).is_err());
    }

    #[test]
    fn dirichlet_uniform_concentration_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 7;
        let conc = vec![1.0; m];
        let mut mean = vec![0.0; m];
        let draws = 100_000;
        for _ in 0..draws {
            let s = dirichlet_sample(&conc, &mut rng).unwrap();
            let sum: f64 = s.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(s.iter().all(|&x| x > 0.0));
            for (acc, x) in mean.iter_mut().zip(&s) {
                *acc += x;
            }
        }
        for acc in &mean {
            assert!((acc / draws as f64 - 1.0 / m as f64).abs() < 0.01);
        }
    }

    #[test]
    fn dirichlet_concentration_limit_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = dirichlet_sample(&vec![1e7; 4], &mut rng).unwrap();
        for &x in &s {
            assert!((x - 0.25).abs() < 1e-2);
        }

        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            dirichlet_sample(&[0.5, 1.5], &mut a).unwrap(),
            dirichlet_sample(&[0.5, 1.5], &mut b).unwrap()
        );
        assert!(dirichlet_sample(&[0.0, 1.0], &mut a).is_err());
    }

    #[test]
    fn single_pred_scopes_coincide() {
        let logits = [0.3, -0.7, 1.1, 0.0, 0.2, -0.1, 0.9];
        let a = input_softmax(&logits).unwrap();
        let b = local_softmax(&logits, 7).unwrap();
        assert_close(&a, &b, 1e-15);
    }

    #[test]
    fn arch_params_init_scale_and_shape() {
        let spec = SpaceSpec::lhd();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ArchParams::init(&spec, &mut rng).unwrap();
        p.validate().unwrap();
        assert_eq!(p.cells.len(), 2);
        let cell = &p.cells[&CellKind::Normal];
        assert_eq!(cell.node_logits.len(), 5);
        assert_eq!(cell.node_logits[0].len(), 14);
        assert_eq!(cell.node_logits[4].len(), 42);
        for x in cell.node_logits.iter().flatten() {
            assert!(x.abs() < 0.01, "init draws are scaled by 1e-3");
        }

        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let q = ArchParams::init(&spec, &mut rng2).unwrap();
        assert_eq!(p, q);

        let text = serde_json::to_string(&p).unwrap();
        let back = ArchParams::from_json(&text).unwrap();
        assert_eq!(back, p);
    }
}
