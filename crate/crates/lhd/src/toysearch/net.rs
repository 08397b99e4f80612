//! Desk-scale supernet: every candidate operation becomes a small structured
//! linear map over feature vectors, wired exactly like one searched cell.
//!
//! Convolution analogs are banded matrices (the band pattern encodes kernel
//! size and dilation), separable convs stack two banded stages, and pools
//! become sliding-window reductions. The continuous forward mixes candidate
//! outputs with architecture weights supplied on the tape; the discrete
//! forward reuses the same shared weights with hard 0/1 masks, so one-hot
//! architecture parameters reproduce the discrete network exactly.

use rand_chacha::ChaCha8Rng;

use crate::error::LhdError;
use crate::space::{CellGenotype, OpKind, SpaceFamily, SpaceSpec, N_INPUTS};
use crate::toysearch::tape::{Matrix, NodeId, Tape};
use crate::Result;

/// Feature and class dimensions of the toy problem.
#[derive(Debug, Clone, Copy)]
pub struct ToyDims {
    pub d: usize,
    pub n_classes: usize,
}

/// Band offsets of the linear-map analog for an operation, plus whether the
/// op stacks two stages. Free ops return `None`.
pub fn band_offsets(kind: OpKind) -> Option<(Vec<i64>, bool)> {
    match kind {
        OpKind::Skip | OpKind::MaxPool3 | OpKind::AvgPool3 => None,
        OpKind::Uconv3D1 => Some((vec![-1, 0, 1], false)),
        OpKind::Uconv5D1 => Some((vec![-2, -1, 0, 1, 2], false)),
        OpKind::Uconv3D2 => Some((vec![-2, 0, 2], false)),
        OpKind::Uconv5D2 => Some((vec![-4, -2, 0, 2, 4], false)),
        OpKind::SepConv3 => Some((vec![-1, 0, 1], true)),
        OpKind::SepConv5 => Some((vec![-2, -1, 0, 1, 2], true)),
        OpKind::DilConv3 => Some((vec![-2, 0, 2], false)),
        OpKind::DilConv5 => Some((vec![-4, -2, 0, 2, 4], false)),
    }
}

fn band_mask(d: usize, offsets: &[i64]) -> Matrix {
    Matrix::from_fn(d, d, |i, j| {
        if offsets.contains(&(j as i64 - i as i64)) {
            1.0
        } else {
            0.0
        }
    })
}

/// Trainable tensors of one candidate operation.
#[derive(Debug, Clone)]
pub struct OpParams {
    pub first: Option<Matrix>,
    pub second: Option<Matrix>,
}

/// All trainable tensors of the toy supernet.
#[derive(Debug, Clone)]
pub struct ToyNet {
    pub spec: SpaceSpec,
    pub dims: ToyDims,
    pub stem: Matrix,
    /// Per intermediate node, per flat (source, op) pair.
    pub ops: Vec<Vec<OpParams>>,
    /// Concat-mixer for the concatenation output block; absent for the
    /// classic family whose head consumes the dense concat directly.
    pub mixer: Option<Matrix>,
    pub classifier: Matrix,
    pub classifier_bias: Matrix,
}

/// Tape handles for the leaves of a [`ToyNet`], one forward's worth.
pub struct NetNodes {
    pub stem: NodeId,
    pub ops: Vec<Vec<(Option<NodeId>, Option<NodeId>)>>,
    pub mixer: Option<NodeId>,
    pub classifier: NodeId,
    pub classifier_bias: NodeId,
}

impl ToyNet {
    pub fn init(spec: &SpaceSpec, dims: ToyDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if spec.cell_kinds.len() != 1 {
            return Err(LhdError::InvalidSpace(
                "the toy supernet instantiates a single searched cell".into(),
            ));
        }
        let d = dims.d;
        let scale = 1.0 / (d as f64).sqrt();
        let stem = Matrix::randn(d, d, scale, rng);
        let mut ops = Vec::new();
        for v in spec.intermediate_nodes() {
            let mut row = Vec::new();
            for flat in 0..spec.n_pairs(v) {
                let (_, op_idx) = spec.pair_of(flat);
                let op = spec.ops()[op_idx];
                let params = match band_offsets(op) {
                    None => OpParams {
                        first: None,
                        second: None,
                    },
                    Some((offsets, two_stage)) => {
                        let mask = band_mask(d, &offsets);
                        let draw = |rng: &mut ChaCha8Rng| {
                            let mut w = Matrix::randn(d, d, scale, rng);
                            for (x, m) in w.data.iter_mut().zip(&mask.data) {
                                *x *= m;
                            }
                            w
                        };
                        let first = draw(rng);
                        let second = if two_stage { Some(draw(rng)) } else { None };
                        OpParams {
                            first: Some(first),
                            second,
                        }
                    }
                };
                row.push(params);
            }
            ops.push(row);
        }
        let n = spec.n_intermediate;
        let (mixer, head_width) = match spec.family {
            SpaceFamily::Lhd => (Some(Matrix::randn(n * d, d, scale, rng)), 2 * d),
            SpaceFamily::Dss => (None, n * d),
        };
        let classifier = Matrix::randn(head_width, dims.n_classes, scale, rng);
        let classifier_bias = Matrix::zeros(1, dims.n_classes);
        Ok(ToyNet {
            spec: spec.clone(),
            dims,
            stem,
            ops,
            mixer,
            classifier,
            classifier_bias,
        })
    }

    /// Registers every trainable tensor on a fresh tape.
    pub fn leaves(&self, tape: &mut Tape) -> NetNodes {
        let stem = tape.leaf(self.stem.clone());
        let ops = self
            .ops
            .iter()
            .map(|row| {
                row.iter()
                    .map(|p| {
                        (
                            p.first.as_ref().map(|m| tape.leaf(m.clone())),
                            p.second.as_ref().map(|m| tape.leaf(m.clone())),
                        )
                    })
                    .collect()
            })
            .collect();
        let mixer = self.mixer.as_ref().map(|m| tape.leaf(m.clone()));
        let classifier = tape.leaf(self.classifier.clone());
        let classifier_bias = tape.leaf(self.classifier_bias.clone());
        NetNodes {
            stem,
            ops,
            mixer,
            classifier,
            classifier_bias,
        }
    }

    /// Writes gradients from the tape back as parameter updates through a
    /// caller-supplied rule.
    pub fn apply_updates(
        &mut self,
        tape: &Tape,
        nodes: &NetNodes,
        mut update: impl FnMut(usize, &mut Matrix, &Matrix),
    ) {
        let mut slot = 0;
        let mut one = |slot: &mut usize, param: &mut Matrix, id: NodeId| {
            update(*slot, param, tape.grad(id));
            *slot += 1;
        };
        one(&mut slot, &mut self.stem, nodes.stem);
        for (row, row_nodes) in self.ops.iter_mut().zip(&nodes.ops) {
            for (p, (first, second)) in row.iter_mut().zip(row_nodes) {
                if let (Some(m), Some(id)) = (p.first.as_mut(), first) {
                    one(&mut slot, m, *id);
                }
                if let (Some(m), Some(id)) = (p.second.as_mut(), second) {
                    one(&mut slot, m, *id);
                }
            }
        }
        if let (Some(m), Some(id)) = (self.mixer.as_mut(), nodes.mixer) {
            one(&mut slot, m, id);
        }
        one(&mut slot, &mut self.classifier, nodes.classifier);
        one(&mut slot, &mut self.classifier_bias, nodes.classifier_bias);
    }

    /// Visits every trainable tensor in the slot order of
    /// [`ToyNet::apply_updates`], without needing a tape.
    pub fn for_each_param(&mut self, mut visit: impl FnMut(usize, &mut Matrix)) {
        let mut slot = 0;
        let mut one = |slot: &mut usize, param: &mut Matrix| {
            visit(*slot, param);
            *slot += 1;
        };
        one(&mut slot, &mut self.stem);
        for row in self.ops.iter_mut() {
            for p in row.iter_mut() {
                if let Some(m) = p.first.as_mut() {
                    one(&mut slot, m);
                }
                if let Some(m) = p.second.as_mut() {
                    one(&mut slot, m);
                }
            }
        }
        if let Some(m) = self.mixer.as_mut() {
            one(&mut slot, m);
        }
        one(&mut slot, &mut self.classifier);
        one(&mut slot, &mut self.classifier_bias);
    }

    /// Number of parameter slots visited by [`ToyNet::apply_updates`].
    pub fn n_slots(&self) -> usize {
        let mut n = 1;
        for row in &self.ops {
            for p in row {
                n += p.first.is_some() as usize + p.second.is_some() as usize;
            }
        }
        n += self.mixer.is_some() as usize;
        n + 2
    }
}

/// Output of one candidate op applied to a node value on the tape.
pub fn op_output(
    tape: &mut Tape,
    kind: OpKind,
    x: NodeId,
    weights: &(Option<NodeId>, Option<NodeId>),
    d: usize,
) -> NodeId {
    match kind {
        OpKind::Skip => x,
        OpKind::MaxPool3 => tape.window_max(x, 3),
        OpKind::AvgPool3 => tape.window_avg(x, 3),
        _ => {
            let (offsets, two_stage) = band_offsets(kind).unwrap();
            let mask = band_mask(d, &offsets);
            let w1 = tape.emul_const(weights.0.unwrap(), mask.clone());
            let h = tape.matmul(x, w1);
            let h = tape.tanh(h);
            if two_stage {
                let w2 = tape.emul_const(weights.1.unwrap(), mask);
                let h2 = tape.matmul(h, w2);
                tape.tanh(h2)
            } else {
                h
            }
        }
    }
}

/// Auxiliary-skip placement for the shortcut-style update rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutScope {
    /// One shortcut per compound edge.
    Edge,
    /// One shortcut per candidate operation.
    Operation,
}

/// Architecture-weight handles for one continuous forward.
pub struct ArchNodes {
    /// Per intermediate node: mixture weights over its flat (source, op)
    /// pairs, already normalized on the tape.
    pub node_weights: Vec<NodeId>,
    /// Per intermediate node: per-source path weights (partial-channel rule).
    pub paths: Option<Vec<NodeId>>,
    /// Summation-block weights over output paths.
    pub ssb: Option<NodeId>,
    /// Concatenation-block gates over output paths.
    pub csb: Option<NodeId>,
}

/// Knobs that alter the continuous forward for specific update rules.
#[derive(Debug, Clone, Default)]
pub struct ForwardCfg {
    pub shortcut: Option<(ShortcutScope, f64)>,
    /// Per-feature 0/1 mask; masked-out channels bypass the mixed op.
    pub channel_mask: Option<Vec<f64>>,
}

/// Continuous-forward outputs.
pub struct ForwardOut {
    pub logits: NodeId,
    /// Auxiliary shortcut terms inserted, for structural checks.
    pub shortcut_terms: usize,
}

/// Mixed-operation forward of the whole toy supernet.
pub fn forward_supernet(
    tape: &mut Tape,
    net: &NetNodes,
    arch: &ArchNodes,
    spec: &SpaceSpec,
    dims: ToyDims,
    x_batch: NodeId,
    cfg: &ForwardCfg,
) -> Result<ForwardOut> {
    let d = dims.d;
    let batch = tape.value(x_batch).rows;
    let mut shortcut_terms = 0;
    let stem_lin = tape.matmul(x_batch, net.stem);
    let x1 = tape.tanh(stem_lin);
    let mut xs: Vec<NodeId> = vec![x_batch, x1];

    let mask_pair = cfg.channel_mask.as_ref().map(|m| {
        assert_eq!(m.len(), d, "channel mask length mismatch");
        let keep = Matrix::from_fn(batch, d, |_, c| m[c]);
        let drop = Matrix::from_fn(batch, d, |_, c| 1.0 - m[c]);
        (keep, drop)
    });

    for v in spec.intermediate_nodes() {
        let row = v - N_INPUTS;
        let mut g_list = Vec::with_capacity(spec.n_pairs(v));
        for flat in 0..spec.n_pairs(v) {
            let (src, op_idx) = spec.pair_of(flat);
            let op = spec.ops()[op_idx];
            let input = match &mask_pair {
                Some((keep, _)) => tape.emul_const(xs[src], keep.clone()),
                None => xs[src],
            };
            let mut out = op_output(tape, op, input, &net.ops[row][flat], d);
            if let Some((ShortcutScope::Operation, beta)) = cfg.shortcut {
                let aux = tape.scale(xs[src], beta);
                out = tape.add(out, aux);
                shortcut_terms += 1;
            }
            g_list.push(out);
        }
        let mut node = tape.weighted_sum(arch.node_weights[row], &g_list);
        if let Some((ShortcutScope::Edge, beta)) = cfg.shortcut {
            let all_srcs = tape.sum_list(&xs[..v]);
            let aux = tape.scale(all_srcs, beta);
            node = tape.add(node, aux);
            shortcut_terms += v;
        }
        if let (Some((_, drop)), Some(paths)) = (&mask_pair, &arch.paths) {
            let mut bypass = Vec::with_capacity(v);
            for src in 0..v {
                let masked_out = tape.emul_const(xs[src], drop.clone());
                bypass.push(tape.entry_scale(masked_out, paths[row], src));
            }
            let bypass_sum = tape.sum_list(&bypass);
            node = tape.add(node, bypass_sum);
        }
        xs.push(node);
    }

    let intermediates = &xs[N_INPUTS..];
    let head = match spec.family {
        SpaceFamily::Lhd => {
            let ssb = arch.ssb.ok_or_else(|| {
                LhdError::InvalidArchParams("summation-block weights missing".into())
            })?;
            let csb = arch.csb.ok_or_else(|| {
                LhdError::InvalidArchParams("concatenation-block gates missing".into())
            })?;
            let f_plus = tape.weighted_sum(ssb, intermediates);
            let gated: Vec<NodeId> = intermediates
                .iter()
                .enumerate()
                .map(|(i, &x)| tape.entry_scale(x, csb, i))
                .collect();
            let cat = tape.concat_cols(&gated);
            let mixer = net
                .mixer
                .ok_or_else(|| LhdError::InvalidSpace("mixer tensor missing".into()))?;
            let f_csb = tape.matmul(cat, mixer);
            tape.concat_cols(&[f_plus, f_csb])
        }
        SpaceFamily::Dss => tape.concat_cols(intermediates),
    };
    let lin = tape.matmul(head, net.classifier);
    let logits = tape.add_row_broadcast(lin, net.classifier_bias);
    Ok(ForwardOut {
        logits,
        shortcut_terms,
    })
}

/// Forward of a discretized cell through the shared supernet tensors:
/// selected ops are summed per node, removed nodes contribute zeros, and
/// output blocks use hard 0/1 masks over the same mixer and classifier.
pub fn forward_discrete(
    tape: &mut Tape,
    net: &NetNodes,
    cell: &CellGenotype,
    removed: &[usize],
    spec: &SpaceSpec,
    dims: ToyDims,
    x_batch: NodeId,
) -> Result<NodeId> {
    let d = dims.d;
    let batch = tape.value(x_batch).rows;
    let stem_lin = tape.matmul(x_batch, net.stem);
    let x1 = tape.tanh(stem_lin);
    let mut xs: Vec<NodeId> = vec![x_batch, x1];

    for v in spec.intermediate_nodes() {
        let row = v - N_INPUTS;
        if removed.contains(&v) {
            xs.push(tape.leaf(Matrix::zeros(batch, d)));
            continue;
        }
        let mut parts = Vec::new();
        for sel in cell.selections.iter().filter(|s| s.dst() == v) {
            let op_idx = spec.op_index(sel.op()).ok_or_else(|| {
                LhdError::InvalidGenotype(format!("op {:?} outside the space menu", sel.op()))
            })?;
            let flat = spec.pair_index(sel.src(), op_idx);
            let out = op_output(tape, sel.op(), xs[sel.src()], &net.ops[row][flat], d);
            parts.push(out);
        }
        if parts.is_empty() {
            return Err(LhdError::InvalidGenotype(format!(
                "kept node {v} has no selections"
            )));
        }
        xs.push(tape.sum_list(&parts));
    }

    let intermediates = &xs[N_INPUTS..];
    let head = match spec.family {
        SpaceFamily::Lhd => {
            let ssb_parts: Vec<NodeId> = cell.ssb.iter().map(|&node| xs[node]).collect();
            let f_plus = if ssb_parts.is_empty() {
                tape.leaf(Matrix::zeros(batch, d))
            } else {
                tape.sum_list(&ssb_parts)
            };
            let cat_parts: Vec<NodeId> = intermediates
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if cell.csb.contains(&(i + N_INPUTS)) {
                        x
                    } else {
                        tape.leaf(Matrix::zeros(batch, d))
                    }
                })
                .collect();
            let cat = tape.concat_cols(&cat_parts);
            let mixer = net
                .mixer
                .ok_or_else(|| LhdError::InvalidSpace("mixer tensor missing".into()))?;
            let f_csb = tape.matmul(cat, mixer);
            tape.concat_cols(&[f_plus, f_csb])
        }
        SpaceFamily::Dss => tape.concat_cols(intermediates),
    };
    let lin = tape.matmul(head, net.classifier);
    Ok(tape.add_row_broadcast(lin, net.classifier_bias))
}
