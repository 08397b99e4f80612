//! One search trial end to end: supernet training under a chosen update
//! rule, discretization, pruning, proxy retraining of the discrete cell, and
//! capacity pricing of the result at benchmark scale.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capacity::{count_stats, scale_to_1m};
use crate::discretize::{discretize, is_valid, prune_removable, random_genotype};
use crate::error::LhdError;
use crate::relax::{ArchParams, CellParams};
use crate::space::{stack_plan, CellKind, Finalnet, PolicyId, SpaceFamily, SpaceSpec};
use crate::toysearch::config::SearchConfig;
use crate::toysearch::methods::{
    cosine_lr, exp_gradient_update, linear_schedule, sp_temperature, Adam, Method, SgdMomentum,
};
use crate::toysearch::net::{
    forward_discrete, forward_supernet, ArchNodes, ForwardCfg, NetNodes, ShortcutScope, ToyDims,
    ToyNet,
};
use crate::toysearch::tape::{Matrix, NodeId, Tape};
use crate::toysearch::task::{accuracy, ToyTask};
use crate::Result;

/// Feature width of the toy problem.
pub const TOY_DIM: usize = 8;
/// Class count of the toy problem.
pub const TOY_CLASSES: usize = 3;
/// Rows in each split of the toy dataset.
pub const TOY_SPLIT: usize = 96;

/// The searched space for a policy, instantiated as one toy cell.
pub fn toy_space(policy: PolicyId) -> SpaceSpec {
    let family = match policy {
        PolicyId::Original => SpaceFamily::Dss,
        _ => SpaceFamily::Lhd,
    };
    let n_intermediate = match family {
        SpaceFamily::Dss => 4,
        SpaceFamily::Lhd => 5,
    };
    SpaceSpec {
        family,
        n_intermediate,
        n_ops: 7,
        cell_kinds: vec![CellKind::Normal],
    }
}

/// Architecture parameters held by the harness, one matrix per logical row.
/// Interpretation depends on the method: raw logits for softmax-style rules,
/// simplex points for multiplicative-weight rules, log-concentrations for
/// the Dirichlet rule.
#[derive(Debug, Clone)]
pub struct ToyArch {
    pub node_rows: Vec<Matrix>,
    pub paths: Option<Vec<Matrix>>,
    pub ssb: Option<Matrix>,
    pub csb: Option<Matrix>,
}

impl ToyArch {
    fn init(method: Method, spec: &SpaceSpec, rng: &mut ChaCha8Rng) -> Self {
        let n = spec.n_intermediate;
        let m = spec.n_ops;
        let node_rows = spec
            .intermediate_nodes()
            .map(|v| {
                let cols = v * m;
                match method {
                    Method::GaeaErm | Method::GaeaBilevel => match spec.family {
                        SpaceFamily::Lhd => Matrix::filled(1, cols, 1.0 / cols as f64),
                        SpaceFamily::Dss => Matrix::filled(1, cols, 1.0 / m as f64),
                    },
                    _ => Matrix::randn(1, cols, 1e-3, rng),
                }
            })
            .collect();
        let paths = (method == Method::PcDarts).then(|| {
            spec.intermediate_nodes()
                .map(|v| Matrix::randn(1, v, 1e-3, rng))
                .collect()
        });
        let (ssb, csb) = match spec.family {
            SpaceFamily::Dss => (None, None),
            SpaceFamily::Lhd => {
                let ssb = match method {
                    Method::GaeaErm | Method::GaeaBilevel => Matrix::filled(1, n, 1.0 / n as f64),
                    _ => Matrix::randn(1, n, 1e-3, rng),
                };
                (Some(ssb), Some(Matrix::randn(1, n, 1e-3, rng)))
            }
        };
        ToyArch {
            node_rows,
            paths,
            ssb,
            csb,
        }
    }
}

/// Tape handles of the raw architecture leaves for one forward.
struct ArchLeaves {
    node_rows: Vec<NodeId>,
    paths: Option<Vec<NodeId>>,
    ssb: Option<NodeId>,
    csb: Option<NodeId>,
}

/// Gradients read back from a tape, shaped like [`ToyArch`].
struct ArchGrads {
    node_rows: Vec<Matrix>,
    paths: Option<Vec<Matrix>>,
    ssb: Option<Matrix>,
    csb: Option<Matrix>,
}

impl ArchGrads {
    fn collect(tape: &Tape, leaves: &ArchLeaves) -> Self {
        ArchGrads {
            node_rows: leaves.node_rows.iter().map(|&id| tape.grad(id).clone()).collect(),
            paths: leaves
                .paths
                .as_ref()
                .map(|p| p.iter().map(|&id| tape.grad(id).clone()).collect()),
            ssb: leaves.ssb.map(|id| tape.grad(id).clone()),
            csb: leaves.csb.map(|id| tape.grad(id).clone()),
        }
    }

    /// `self + lam * other`, entry by entry.
    fn add_scaled(mut self, other: &ArchGrads, lam: f64) -> Self {
        let acc = |a: &mut Matrix, b: &Matrix| {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += lam * y;
            }
        };
        for (a, b) in self.node_rows.iter_mut().zip(&other.node_rows) {
            acc(a, b);
        }
        if let (Some(ps), Some(qs)) = (self.paths.as_mut(), other.paths.as_ref()) {
            for (a, b) in ps.iter_mut().zip(qs) {
                acc(a, b);
            }
        }
        if let (Some(a), Some(b)) = (self.ssb.as_mut(), other.ssb.as_ref()) {
            acc(a, b);
        }
        if let (Some(a), Some(b)) = (self.csb.as_mut(), other.csb.as_ref()) {
            acc(a, b);
        }
        self
    }
}

/// One probed parameter coordinate for finite-difference checks.
#[derive(Debug, Clone, Copy)]
enum ProbeSite {
    Node(usize),
    Path(usize),
    Ssb,
    Csb,
    Net(usize),
}

/// How a method arranges its two optimization problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    /// Architecture step on validation data, weight step on train data.
    Bilevel,
    /// Architecture gradient mixes train and validation losses.
    Mixed,
    /// One loss, one tape, both updates.
    Single,
}

fn level_of(method: Method) -> Level {
    match method {
        Method::Milenas => Level::Mixed,
        Method::GaeaErm | Method::SurgeNas => Level::Single,
        _ => Level::Bilevel,
    }
}

/// A running supernet search under one update rule.
pub struct ToySearch {
    pub method: Method,
    pub cfg: SearchConfig,
    pub spec: SpaceSpec,
    pub dims: ToyDims,
    pub task: ToyTask,
    net: ToyNet,
    arch: ToyArch,
    w_opt: SgdMomentum,
    arch_opt: Adam,
    epoch: usize,
    train_cursor: usize,
    val_cursor: usize,
    rng: ChaCha8Rng,
}

/// First and last supernet training loss of a trial, for sanity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl ToySearch {
    pub fn new(
        method: Method,
        cfg: SearchConfig,
        spec: SpaceSpec,
        dims: ToyDims,
        task: ToyTask,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if method == Method::Random {
            return Err(LhdError::SearchFailure(
                "the random baseline samples directly and runs no supernet".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ToyNet::init(&spec, dims, &mut rng)?;
        let arch = ToyArch::init(method, &spec, &mut rng);
        let w_opt = SgdMomentum::new(net.n_slots(), cfg.momentum, cfg.weight_decay);
        let arch_opt = Adam::new(
            2 * spec.n_intermediate + 2,
            0.5,
            0.999,
            cfg.arch_weight_decay,
        );
        Ok(ToySearch {
            method,
            cfg,
            spec,
            dims,
            task,
            net,
            arch,
            w_opt,
            arch_opt,
            epoch: 0,
            train_cursor: 0,
            val_cursor: 0,
            rng,
        })
    }

    fn current_temperature(&self) -> f64 {
        let warmup = self.cfg.additional_or("warmup", 0.0) as usize;
        let temp = self.cfg.additional_or("temp", 1.0);
        let e = self.epoch.min(self.cfg.epochs.saturating_sub(1));
        sp_temperature(temp, warmup, e, self.cfg.epochs)
    }

    fn current_tau(&self) -> f64 {
        let e = self.epoch.min(self.cfg.epochs.saturating_sub(1));
        linear_schedule(
            self.cfg.additional_or("tau_max", 10.0),
            self.cfg.additional_or("tau_min", 0.1),
            e,
            self.cfg.epochs,
        )
    }

    fn current_shortcut_beta(&self) -> f64 {
        let e = self.epoch.min(self.cfg.epochs.saturating_sub(1));
        linear_schedule(
            self.cfg.additional_or("beta_start", 1.0),
            self.cfg.additional_or("beta_end", 0.0),
            e,
            self.cfg.epochs,
        )
    }

    fn current_penalty_weight(&self) -> f64 {
        let e = self.epoch.min(self.cfg.epochs.saturating_sub(1));
        linear_schedule(
            self.cfg.additional_or("weight_start", 0.0),
            self.cfg.additional_or("weight_end", 100.0),
            e,
            self.cfg.epochs,
        )
    }

    /// Puts the architecture on a tape using the method's training-time
    /// transform. `train_mode` enables the stochastic parts.
    fn arch_on_tape(&mut self, tape: &mut Tape, train_mode: bool) -> (ArchLeaves, ArchNodes) {
        let mut path_leaves = None;
        let mut path_nodes: Option<Vec<NodeId>> = None;
        if let Some(rows) = &self.arch.paths {
            let mut leaves = Vec::with_capacity(rows.len());
            let mut nodes = Vec::with_capacity(rows.len());
            for row in rows {
                let leaf = tape.leaf(row.clone());
                leaves.push(leaf);
                nodes.push(tape.softmax_rows(leaf));
            }
            path_leaves = Some(leaves);
            path_nodes = Some(nodes);
        }
        let mut leaf_rows = Vec::new();
        let mut node_weights = Vec::new();
        for (i, row) in self.arch.node_rows.iter().enumerate() {
            let cols = row.cols;
            let chunk = match self.spec.family {
                SpaceFamily::Lhd => cols,
                SpaceFamily::Dss => self.spec.n_ops,
            };
            let leaf = tape.leaf(row.clone());
            leaf_rows.push(leaf);
            let weights = match self.method {
                Method::GaeaErm | Method::GaeaBilevel => leaf,
                Method::SpDarts => {
                    let temp = self.current_temperature();
                    let scaled = tape.scale(leaf, 1.0 / temp);
                    tape.softmax_chunks(scaled, chunk)
                }
                Method::Gdas if train_mode => {
                    let gumbel = Matrix::from_fn(1, cols, |_, _| {
                        let u: f64 = self.rng.random::<f64>().max(1e-12);
                        -(-u.ln()).max(1e-12).ln()
                    });
                    let tau = self.current_tau();
                    let noisy = tape.add_const(leaf, &gumbel);
                    let scaled = tape.scale(noisy, 1.0 / tau);
                    let soft = tape.softmax_chunks(scaled, chunk);
                    let hard = one_hot_chunks(tape.value(soft), chunk);
                    tape.straight_through(soft, hard)
                }
                Method::Drnas if train_mode => {
                    let eps = Matrix::randn(1, cols, 1.0, &mut self.rng);
                    dirichlet_pathwise(tape, leaf, &eps, chunk)
                }
                Method::PcDarts => {
                    let op_soft = tape.softmax_chunks(leaf, self.spec.n_ops);
                    let path_soft = path_nodes.as_ref().expect("path weights exist")[i];
                    let path_rep = tape.repeat_entries(path_soft, self.spec.n_ops);
                    tape.emul(op_soft, path_rep)
                }
                _ => tape.softmax_chunks(leaf, chunk),
            };
            node_weights.push(weights);
        }
        let (ssb_leaf, ssb_node) = match &self.arch.ssb {
            None => (None, None),
            Some(row) => {
                let leaf = tape.leaf(row.clone());
                let node = match self.method {
                    Method::GaeaErm | Method::GaeaBilevel => leaf,
                    _ => tape.softmax_rows(leaf),
                };
                (Some(leaf), Some(node))
            }
        };
        let (csb_leaf, csb_node) = match &self.arch.csb {
            None => (None, None),
            Some(row) => {
                let leaf = tape.leaf(row.clone());
                (Some(leaf), Some(tape.sigmoid(leaf)))
            }
        };
        let leaves = ArchLeaves {
            node_rows: leaf_rows,
            paths: path_leaves,
            ssb: ssb_leaf,
            csb: csb_leaf,
        };
        let arch_nodes = ArchNodes {
            node_weights,
            paths: path_nodes,
            ssb: ssb_node,
            csb: csb_node,
        };
        (leaves, arch_nodes)
    }

    fn forward_cfg(&mut self) -> ForwardCfg {
        match self.method {
            Method::DartsMinus => ForwardCfg {
                shortcut: Some((ShortcutScope::Edge, self.current_shortcut_beta())),
                channel_mask: None,
            },
            Method::SurgeNas => ForwardCfg {
                shortcut: Some((ShortcutScope::Operation, self.current_shortcut_beta())),
                channel_mask: None,
            },
            Method::PcDarts => {
                let k = self.cfg.additional_or("k", 4.0).max(1.0) as usize;
                let active = self.dims.d.div_ceil(k);
                let mut order: Vec<usize> = (0..self.dims.d).collect();
                for i in (1..order.len()).rev() {
                    let j = self.rng.random_range(0..=i);
                    order.swap(i, j);
                }
                let mut mask = vec![0.0; self.dims.d];
                for &c in order.iter().take(active) {
                    mask[c] = 1.0;
                }
                ForwardCfg {
                    shortcut: None,
                    channel_mask: Some(mask),
                }
            }
            _ => ForwardCfg::default(),
        }
    }

    /// Adds the confidence penalty of the regularized rule to the loss.
    fn add_loss_extras(&self, tape: &mut Tape, loss: NodeId, leaves: &ArchLeaves) -> NodeId {
        if self.method != Method::BetaDarts {
            return loss;
        }
        let weight = self.current_penalty_weight();
        let mut terms = Vec::new();
        for &row in &leaves.node_rows {
            terms.push(tape.log_sum_exp_minus_mean(row));
        }
        if let Some(ssb) = leaves.ssb {
            terms.push(tape.log_sum_exp_minus_mean(ssb));
        }
        let total = tape.sum_list(&terms);
        let scaled = tape.scale(total, weight);
        tape.add(loss, scaled)
    }

    fn next_train(&mut self) -> (Matrix, Vec<usize>) {
        let idx = next_indices(
            &mut self.train_cursor,
            self.task.train_y.len(),
            self.cfg.batch_size,
        );
        self.task.train_batch(&idx)
    }

    fn next_val(&mut self) -> (Matrix, Vec<usize>) {
        let idx = next_indices(
            &mut self.val_cursor,
            self.task.val_y.len(),
            self.cfg.batch_size,
        );
        self.task.val_batch(&idx)
    }

    /// One supernet loss tape: forward on the given batch, cross-entropy,
    /// optional penalty, backward.
    fn loss_tape(
        &mut self,
        x: &Matrix,
        y: &[usize],
        train_mode: bool,
    ) -> Result<(Tape, NetNodes, ArchLeaves, NodeId)> {
        let fcfg = if train_mode {
            self.forward_cfg()
        } else {
            ForwardCfg::default()
        };
        let mut tape = Tape::new();
        let nodes = self.net.leaves(&mut tape);
        let (leaves, arch_nodes) = self.arch_on_tape(&mut tape, train_mode);
        let xb = tape.leaf(x.clone());
        let out = forward_supernet(
            &mut tape,
            &nodes,
            &arch_nodes,
            &self.spec,
            self.dims,
            xb,
            &fcfg,
        )?;
        let ce = tape.cross_entropy(out.logits, y);
        let loss = self.add_loss_extras(&mut tape, ce, &leaves);
        tape.backward(loss);
        Ok((tape, nodes, leaves, loss))
    }

    fn pc_frozen(&self) -> bool {
        self.method == Method::PcDarts
            && (self.epoch as f64) < self.cfg.additional_or("warmup", 0.0)
    }

    fn update_arch(&mut self, grads: ArchGrads) {
        let lr = self.cfg.arch_learning_rate;
        match self.method {
            Method::GaeaErm | Method::GaeaBilevel => {
                for (row, g) in self.arch.node_rows.iter_mut().zip(&grads.node_rows) {
                    let chunk = match self.spec.family {
                        SpaceFamily::Lhd => row.cols,
                        SpaceFamily::Dss => self.spec.n_ops,
                    };
                    exp_gradient_update(row, g, lr, chunk);
                }
                if let (Some(row), Some(g)) = (self.arch.ssb.as_mut(), grads.ssb.as_ref()) {
                    let chunk = row.cols;
                    exp_gradient_update(row, g, lr, chunk);
                }
                if let (Some(row), Some(g)) = (self.arch.csb.as_mut(), grads.csb.as_ref()) {
                    for (w, gg) in row.data.iter_mut().zip(&g.data) {
                        *w -= lr * gg;
                    }
                }
            }
            _ => {
                let n = self.spec.n_intermediate;
                for (i, (row, g)) in self
                    .arch
                    .node_rows
                    .iter_mut()
                    .zip(&grads.node_rows)
                    .enumerate()
                {
                    self.arch_opt.step(i, row, g, lr);
                }
                if let (Some(rows), Some(gs)) = (self.arch.paths.as_mut(), grads.paths.as_ref()) {
                    for (i, (row, g)) in rows.iter_mut().zip(gs).enumerate() {
                        self.arch_opt.step(n + i, row, g, lr);
                    }
                }
                if let (Some(row), Some(g)) = (self.arch.ssb.as_mut(), grads.ssb.as_ref()) {
                    self.arch_opt.step(2 * n, row, g, lr);
                }
                if let (Some(row), Some(g)) = (self.arch.csb.as_mut(), grads.csb.as_ref()) {
                    self.arch_opt.step(2 * n + 1, row, g, lr);
                }
            }
        }
    }

    fn update_weights(&mut self, tape: &Tape, nodes: &NetNodes, lr: f64) {
        let w_opt = &mut self.w_opt;
        self.net
            .apply_updates(tape, nodes, |slot, p, g| w_opt.step(slot, p, g, lr));
    }

    fn step_once(&mut self) -> Result<()> {
        let lr = cosine_lr(
            self.cfg.learning_rate,
            self.cfg.learning_rate_min,
            self.epoch,
            self.cfg.epochs,
        );
        match level_of(self.method) {
            Level::Single => {
                let (tx, ty) = self.next_train();
                let (tape, nodes, leaves, _) = self.loss_tape(&tx, &ty, true)?;
                if !self.pc_frozen() {
                    let grads = ArchGrads::collect(&tape, &leaves);
                    self.update_arch(grads);
                }
                self.update_weights(&tape, &nodes, lr);
            }
            Level::Mixed => {
                let (tx, ty) = self.next_train();
                let (vx, vy) = self.next_val();
                let (train_tape, nodes, train_leaves, _) = self.loss_tape(&tx, &ty, true)?;
                let (val_tape, _, val_leaves, _) = self.loss_tape(&vx, &vy, true)?;
                let lam = self.cfg.additional_or("lambda", 1.0);
                let grads = ArchGrads::collect(&train_tape, &train_leaves)
                    .add_scaled(&ArchGrads::collect(&val_tape, &val_leaves), lam);
                self.update_arch(grads);
                self.update_weights(&train_tape, &nodes, lr);
            }
            Level::Bilevel => {
                if !self.pc_frozen() {
                    let (vx, vy) = self.next_val();
                    let (val_tape, _, val_leaves, _) = self.loss_tape(&vx, &vy, true)?;
                    let grads = ArchGrads::collect(&val_tape, &val_leaves);
                    self.update_arch(grads);
                }
                let (tx, ty) = self.next_train();
                let (train_tape, nodes, _, _) = self.loss_tape(&tx, &ty, true)?;
                self.update_weights(&train_tape, &nodes, lr);
            }
        }
        Ok(())
    }

    /// Deterministic full-train-set loss under the method's noise-free
    /// transform.
    pub fn eval_loss(&mut self) -> Result<f64> {
        let x = self.task.train_x.clone();
        let y = self.task.train_y.clone();
        let mut tape = Tape::new();
        let nodes = self.net.leaves(&mut tape);
        let (_, arch_nodes) = self.arch_on_tape(&mut tape, false);
        let xb = tape.leaf(x);
        let out = forward_supernet(
            &mut tape,
            &nodes,
            &arch_nodes,
            &self.spec,
            self.dims,
            xb,
            &ForwardCfg::default(),
        )?;
        let loss = tape.cross_entropy(out.logits, &y);
        Ok(tape.value(loss).data[0])
    }

    fn loss_value(&mut self, x: &Matrix, y: &[usize]) -> Result<f64> {
        let (tape, _, _, loss) = self.loss_tape(x, y, true)?;
        Ok(tape.value(loss).data[0])
    }

    fn nudge(&mut self, site: ProbeSite, entry: usize, delta: f64) {
        match site {
            ProbeSite::Node(i) => self.arch.node_rows[i].data[entry] += delta,
            ProbeSite::Path(i) => {
                self.arch.paths.as_mut().expect("path site")[i].data[entry] += delta;
            }
            ProbeSite::Ssb => self.arch.ssb.as_mut().expect("ssb site").data[entry] += delta,
            ProbeSite::Csb => self.arch.csb.as_mut().expect("csb site").data[entry] += delta,
            ProbeSite::Net(slot) => self.net.for_each_param(|s, m| {
                if s == slot {
                    m.data[entry] += delta;
                }
            }),
        }
    }

    /// Probes `probes` randomly chosen parameters and returns the worst
    /// mismatch between the tape gradient and a central finite difference,
    /// measured as |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
    /// Schedules are evaluated at `epoch`, and every stochastic forward
    /// (gumbel perturbations, concentration noise, channel masks) replays
    /// identical draws by pinning the rng. The step grows with the cube
    /// root of the loss magnitude, balancing cancellation against
    /// truncation when penalty terms inflate the loss. The hard-selection
    /// rule routes its mixture through an estimator whose backward pass
    /// deliberately disagrees with the forward value, so its architecture
    /// rows are skipped and only its weight gradients are probed.
    pub fn gradient_check(
        &mut self,
        epoch: usize,
        probes: usize,
        eps: f64,
        probe_seed: u64,
    ) -> Result<f64> {
        self.epoch = epoch.min(self.cfg.epochs.saturating_sub(1));
        let saved_rng = self.rng.clone();
        let take = self.cfg.batch_size.min(self.task.train_y.len());
        let idx: Vec<usize> = (0..take).collect();
        let (x, y) = self.task.train_batch(&idx);
        let pin = probe_seed ^ 0x9e37_79b9_7f4a_7c15;

        self.rng = ChaCha8Rng::seed_from_u64(pin);
        let (tape, nodes, leaves, loss) = self.loss_tape(&x, &y, true)?;
        let arch_grads = ArchGrads::collect(&tape, &leaves);
        let mut net_grads: Vec<Matrix> = vec![Matrix::zeros(1, 1); self.net.n_slots()];
        self.net
            .apply_updates(&tape, &nodes, |slot, _, g| net_grads[slot] = g.clone());
        let loss_scale = tape.value(loss).data[0].abs().max(1.0);
        let eps = eps * loss_scale.cbrt();
        drop(tape);

        let mut coords: Vec<(ProbeSite, usize, f64)> = Vec::new();
        if self.method != Method::Gdas {
            for (i, g) in arch_grads.node_rows.iter().enumerate() {
                for (e, &v) in g.data.iter().enumerate() {
                    coords.push((ProbeSite::Node(i), e, v));
                }
            }
            if let Some(gs) = &arch_grads.paths {
                for (i, g) in gs.iter().enumerate() {
                    for (e, &v) in g.data.iter().enumerate() {
                        coords.push((ProbeSite::Path(i), e, v));
                    }
                }
            }
            if let Some(g) = &arch_grads.ssb {
                for (e, &v) in g.data.iter().enumerate() {
                    coords.push((ProbeSite::Ssb, e, v));
                }
            }
            if let Some(g) = &arch_grads.csb {
                for (e, &v) in g.data.iter().enumerate() {
                    coords.push((ProbeSite::Csb, e, v));
                }
            }
        }
        for (slot, g) in net_grads.iter().enumerate() {
            for (e, &v) in g.data.iter().enumerate() {
                coords.push((ProbeSite::Net(slot), e, v));
            }
        }

        let mut picker = ChaCha8Rng::seed_from_u64(probe_seed);
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let (site, entry, analytic) = coords[picker.random_range(0..coords.len())];
            self.nudge(site, entry, eps);
            self.rng = ChaCha8Rng::seed_from_u64(pin);
            let plus = self.loss_value(&x, &y)?;
            self.nudge(site, entry, -2.0 * eps);
            self.rng = ChaCha8Rng::seed_from_u64(pin);
            let minus = self.loss_value(&x, &y)?;
            self.nudge(site, entry, eps);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
        self.rng = saved_rng;
        Ok(worst)
    }

    /// Trains for the configured number of epochs.
    pub fn run(&mut self) -> Result<TrajectorySummary> {
        let initial_loss = self.eval_loss()?;
        let steps = (self.task.train_y.len() / self.cfg.batch_size).max(1);
        for _ in 0..self.cfg.epochs {
            for _ in 0..steps {
                self.step_once()?;
            }
            self.epoch += 1;
        }
        let final_loss = self.eval_loss()?;
        Ok(TrajectorySummary {
            initial_loss,
            final_loss,
        })
    }

    /// Freezes the search state into relaxation parameters whose normalized
    /// weights equal the method's final mixtures, ready for discretization.
    pub fn arch_snapshot(&self) -> Result<ArchParams> {
        let n = self.spec.n_intermediate;
        let m = self.spec.n_ops;
        let node_logits: Vec<Vec<f64>> = self
            .arch
            .node_rows
            .iter()
            .enumerate()
            .map(|(i, row)| match self.method {
                Method::GaeaErm | Method::GaeaBilevel => {
                    row.data.iter().map(|&w| safe_ln(w)).collect()
                }
                Method::SpDarts => {
                    let t = self.current_temperature();
                    row.data.iter().map(|&x| x / t).collect()
                }
                Method::PcDarts => {
                    let paths = self.arch.paths.as_ref().expect("path weights exist");
                    let path_w = softmax_slice(&paths[i].data);
                    let mut combined = Vec::with_capacity(row.cols);
                    for (chunk_idx, chunk) in row.data.chunks(m).enumerate() {
                        let op_w = softmax_slice(chunk);
                        for w in op_w {
                            combined.push(safe_ln(w * path_w[chunk_idx]));
                        }
                    }
                    combined
                }
                _ => row.data.clone(),
            })
            .collect();
        let ssb_logits = match (&self.arch.ssb, self.method) {
            (Some(row), Method::GaeaErm | Method::GaeaBilevel) => {
                row.data.iter().map(|&w| safe_ln(w)).collect()
            }
            (Some(row), _) => row.data.clone(),
            (None, _) => vec![0.0; n],
        };
        let csb_logits = match &self.arch.csb {
            Some(row) => row.data.clone(),
            None => vec![0.0; n],
        };
        let mut cells = BTreeMap::new();
        cells.insert(
            CellKind::Normal,
            CellParams {
                node_logits,
                ssb_logits,
                csb_logits,
            },
        );
        let params = ArchParams {
            space: self.spec.clone(),
            cells,
        };
        params.validate()?;
        Ok(params)
    }
}

fn next_indices(cursor: &mut usize, len: usize, batch: usize) -> Vec<usize> {
    let take = batch.min(len);
    let idx = (0..take).map(|k| (*cursor + k) % len).collect();
    *cursor = (*cursor + take) % len;
    idx
}

fn safe_ln(w: f64) -> f64 {
    w.max(1e-300).ln()
}

fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Hard one-hot per chunk at the soft argmax, for the straight-through rule.
fn one_hot_chunks(soft: &Matrix, chunk: usize) -> Matrix {
    let mut hard = Matrix::zeros(soft.rows, soft.cols);
    for start in (0..soft.cols).step_by(chunk) {
        let slice = &soft.data[start..start + chunk];
        let best = slice
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        hard.data[start + best] = 1.0;
    }
    hard
}

/// Pathwise Dirichlet sample on the tape via a cube-root Gaussian
/// approximation of each Gamma draw, floored smoothly to stay positive:
/// `g_i = b_i * max(1 - 1/(9 b_i) + eps_i / (3 sqrt(b_i)), 0)^3`, then
/// chunk-normalized. Concentrations are `exp` of the leaf, so gradients
/// reach the log-concentration parameters.
fn dirichlet_pathwise(tape: &mut Tape, log_conc: NodeId, eps: &Matrix, chunk: usize) -> NodeId {
    let cols = eps.cols;
    let b = tape.exp(log_conc);
    let inv_b = tape.pow_const(b, -1.0);
    let term9 = tape.scale(inv_b, -1.0 / 9.0);
    let inv_sqrt_b = tape.pow_const(b, -0.5);
    let eps_third = Matrix::from_vec(1, cols, eps.data.iter().map(|e| e / 3.0).collect());
    let term_eps = tape.emul_const(inv_sqrt_b, eps_third);
    let partial = tape.add(term9, term_eps);
    let ones = Matrix::filled(1, cols, 1.0);
    let t = tape.add_const(partial, &ones);
    let scaled = tape.scale(t, 20.0);
    let sp = tape.softplus(scaled);
    let floored = tape.scale(sp, 1.0 / 20.0);
    let cubed = tape.pow_const(floored, 3.0);
    let gamma = tape.emul(b, cubed);
    tape.normalize_chunks(gamma, chunk)
}

/// Outcome of one toy trial, priced at benchmark scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub method: Method,
    pub policy: PolicyId,
    pub seed: u64,
    pub finalnet: Option<Finalnet>,
    /// Validation accuracy of the retrained discrete cell, in percent.
    pub val_acc: f64,
    /// Train accuracy of the retrained discrete cell, in percent.
    pub train_acc: f64,
    pub params: u64,
    pub depth: u64,
    pub trajectory: TrajectorySummary,
    pub failed: bool,
}

/// Duplicates the single searched cell into the two-kind benchmark space so
/// capacity accounting prices a full stacked network.
pub fn benchmark_finalnet(toy: &Finalnet) -> Result<Finalnet> {
    let full = match toy.space.family {
        SpaceFamily::Lhd => SpaceSpec::lhd(),
        SpaceFamily::Dss => SpaceSpec::dss(),
    };
    if toy.space.n_intermediate != full.n_intermediate || toy.space.n_ops != full.n_ops {
        return Err(LhdError::InvalidGenotype(
            "toy cell does not match the benchmark space shape".into(),
        ));
    }
    let cell = toy
        .cells
        .get(&CellKind::Normal)
        .or_else(|| toy.cells.values().next())
        .ok_or_else(|| LhdError::InvalidGenotype("finalnet has no cells".into()))?;
    let mut cells = BTreeMap::new();
    cells.insert(CellKind::Normal, cell.clone());
    cells.insert(CellKind::Reduction, cell.clone());
    let mut removed = Vec::new();
    for &(_, node) in &toy.removed {
        removed.push((CellKind::Normal, node));
        removed.push((CellKind::Reduction, node));
    }
    Ok(Finalnet {
        space: full,
        policy: toy.policy,
        cells,
        removed,
        seed: toy.seed,
    })
}

fn retrain_discrete(
    finalnet: &Finalnet,
    task: &ToyTask,
    cfg: &SearchConfig,
    dims: ToyDims,
    seed: u64,
) -> Result<(f64, f64, TrajectorySummary)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = finalnet
        .cells
        .get(&CellKind::Normal)
        .ok_or_else(|| LhdError::InvalidGenotype("finalnet lacks the searched cell".into()))?;
    let removed: Vec<usize> = finalnet
        .removed
        .iter()
        .filter(|(k, _)| *k == CellKind::Normal)
        .map(|&(_, v)| v)
        .collect();
    let mut net = ToyNet::init(&finalnet.space, dims, &mut rng)?;
    let mut opt = SgdMomentum::new(net.n_slots(), cfg.momentum, cfg.weight_decay);
    let steps = (task.train_y.len() / cfg.batch_size).max(1);
    let mut cursor = 0usize;

    let eval = |net: &ToyNet, x: &Matrix, y: &[usize]| -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let nodes = net.leaves(&mut tape);
        let xb = tape.leaf(x.clone());
        let logits = forward_discrete(
            &mut tape,
            &nodes,
            cell,
            &removed,
            &finalnet.space,
            dims,
            xb,
        )?;
        let ce = tape.cross_entropy(logits, y);
        Ok((accuracy(tape.value(logits), y), tape.value(ce).data[0]))
    };

    let (_, initial_loss) = eval(&net, &task.train_x, &task.train_y)?;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, cfg.learning_rate_min, epoch, cfg.epochs);
        for _ in 0..steps {
            let idx = next_indices(&mut cursor, task.train_y.len(), cfg.batch_size);
            let (x, y) = task.train_batch(&idx);
            let mut tape = Tape::new();
            let nodes = net.leaves(&mut tape);
            let xb = tape.leaf(x);
            let logits = forward_discrete(
                &mut tape,
                &nodes,
                cell,
                &removed,
                &finalnet.space,
                dims,
                xb,
            )?;
            let loss = tape.cross_entropy(logits, &y);
            tape.backward(loss);
            net.apply_updates(&tape, &nodes, |slot, p, g| opt.step(slot, p, g, lr));
        }
    }
    let (train_acc, final_loss) = eval(&net, &task.train_x, &task.train_y)?;
    let (val_acc, _) = eval(&net, &task.val_x, &task.val_y)?;
    Ok((
        val_acc,
        train_acc,
        TrajectorySummary {
            initial_loss,
            final_loss,
        },
    ))
}

/// Runs one complete trial: search (or random sampling), discretization,
/// pruning, proxy retraining, and benchmark-scale pricing.
pub fn run_trial(
    method: Method,
    policy: PolicyId,
    seed: u64,
    cfg: &SearchConfig,
) -> Result<TrialResult> {
    cfg.validate()?;
    let spec = toy_space(policy);
    let dims = ToyDims {
        d: TOY_DIM,
        n_classes: TOY_CLASSES,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task_seed = rng.random::<u64>();
    let search_seed = rng.random::<u64>();
    let retrain_seed = rng.random::<u64>();
    let task = ToyTask::generate(dims.d, dims.n_classes, TOY_SPLIT, TOY_SPLIT, task_seed);

    let (mut finalnet, search_traj) = if method == Method::Random {
        (random_genotype(&spec, policy, &mut rng)?, None)
    } else {
        let mut search = ToySearch::new(
            method,
            cfg.clone(),
            spec.clone(),
            dims,
            task.clone(),
            search_seed,
        )?;
        let traj = search.run()?;
        let snapshot = search.arch_snapshot()?;
        let genotype = discretize(&snapshot, policy)?;
        let pruned = prune_removable(&genotype);
        if !is_valid(&pruned) {
            return Ok(TrialResult {
                method,
                policy,
                seed,
                finalnet: None,
                val_acc: 0.0,
                train_acc: 0.0,
                params: 0,
                depth: 0,
                trajectory: traj,
                failed: true,
            });
        }
        (pruned, Some(traj))
    };
    finalnet.seed = Some(seed);

    let (val_frac, train_frac, retrain_traj) =
        retrain_discrete(&finalnet, &task, cfg, dims, retrain_seed)?;
    let trajectory = search_traj.unwrap_or(retrain_traj);

    let bench = benchmark_finalnet(&finalnet)?;
    let plan = match policy {
        PolicyId::OneM => scale_to_1m(&bench)?,
        _ => stack_plan(20, 36)?,
    };
    let stats = count_stats(&bench, &plan)?;

    Ok(TrialResult {
        method,
        policy,
        seed,
        finalnet: Some(finalnet),
        val_acc: 100.0 * val_frac,
        train_acc: 100.0 * train_frac,
        params: stats.params,
        depth: stats.depth,
        trajectory,
        failed: false,
    })
}

/// Trial seeds drawn uniformly from `[1, 100000]` without repeats, from a
/// named stream.
pub fn draw_seeds(n: usize, stream_seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let mut seeds: Vec<u64> = Vec::with_capacity(n);
    while seeds.len() < n {
        let s = rng.random_range(1..=100_000u64);
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::OpKind;

    fn quick_cfg(method: Method) -> SearchConfig {
        let mut cfg = SearchConfig::toy(method);
        cfg.epochs = 3;
        if method == Method::SpDarts {
            cfg.additional.insert("warmup".into(), 1.0);
        }
        if method == Method::PcDarts {
            cfg.additional.insert("warmup".into(), 1.0);
        }
        cfg
    }

    #[test]
    fn trials_are_bit_reproducible() {
        let cfg = quick_cfg(Method::Darts);
        let a = run_trial(Method::Darts, PolicyId::Base, 7, &cfg).unwrap();
        let b = run_trial(Method::Darts, PolicyId::Base, 7, &cfg).unwrap();
        assert_eq!(a.val_acc.to_bits(), b.val_acc.to_bits());
        assert_eq!(a.train_acc.to_bits(), b.train_acc.to_bits());
        assert_eq!(a.params, b.params);
        assert_eq!(
            serde_json::to_string(&a.finalnet).unwrap(),
            serde_json::to_string(&b.finalnet).unwrap()
        );
        let c = run_trial(Method::Darts, PolicyId::Base, 8, &cfg).unwrap();
        assert!(a.val_acc != c.val_acc || a.finalnet != c.finalnet);
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        for (method, policy) in [
            (Method::Darts, PolicyId::Base),
            (Method::Gdas, PolicyId::Base),
            (Method::PcDarts, PolicyId::Base),
            (Method::BetaDarts, PolicyId::Base),
            (Method::Darts, PolicyId::Original),
        ] {
            let cfg = quick_cfg(method);
            let spec = toy_space(policy);
            let dims = ToyDims {
                d: TOY_DIM,
                n_classes: TOY_CLASSES,
            };
            let task = ToyTask::generate(dims.d, dims.n_classes, 32, 32, 5);
            let mut search = ToySearch::new(method, cfg, spec, dims, task, 17).unwrap();
            let worst = search.gradient_check(1, 20, 1e-5, 3).unwrap();
            assert!(worst < 1e-5, "{method}/{policy} worst grad err {worst}");
        }
    }

    #[test]
    fn supernet_training_reduces_loss() {
        let cfg = SearchConfig::toy(Method::Darts);
        let result = run_trial(Method::Darts, PolicyId::Base, 11, &cfg).unwrap();
        assert!(!result.failed);
        assert!(
            result.trajectory.final_loss < result.trajectory.initial_loss,
            "loss went {} -> {}",
            result.trajectory.initial_loss,
            result.trajectory.final_loss
        );
    }

    #[test]
    fn every_method_completes_a_trial() {
        for method in Method::ALL {
            let cfg = quick_cfg(method);
            let r = run_trial(method, PolicyId::Base, 23, &cfg)
                .unwrap_or_else(|e| panic!("{method} failed: {e}"));
            assert!(!r.failed, "{method} produced an invalid cell");
            assert!((0.0..=100.0).contains(&r.val_acc), "{method} val acc");
            assert!((0.0..=100.0).contains(&r.train_acc));
            assert!(r.params > 0, "{method} reported zero params");
            assert!(r.depth > 0);
            let f = r.finalnet.unwrap();
            assert_eq!(f.seed, Some(23));
            f.validate().unwrap();
        }
    }

    #[test]
    fn every_policy_works_with_its_family() {
        for policy in [
            PolicyId::Base,
            PolicyId::OneM,
            PolicyId::ThreeOps,
            PolicyId::FourOut,
            PolicyId::Original,
        ] {
            let cfg = quick_cfg(Method::Random);
            let r = run_trial(Method::Random, policy, 31, &cfg).unwrap();
            assert!(!r.failed);
            assert!(r.params > 0, "policy {policy} priced at zero");
            let cfg = quick_cfg(Method::Darts);
            let r = run_trial(Method::Darts, policy, 31, &cfg).unwrap();
            assert!(!r.failed, "darts failed on policy {policy}");
        }
    }

    #[test]
    fn one_m_policy_rescales_to_minimal_width_over_budget() {
        let cfg = quick_cfg(Method::Random);
        let r = run_trial(Method::Random, PolicyId::OneM, 5, &cfg).unwrap();
        assert!(r.params >= 1_500_000, "params {}", r.params);
        let bench = benchmark_finalnet(r.finalnet.as_ref().unwrap()).unwrap();
        let plan = scale_to_1m(&bench).unwrap();
        assert_eq!(plan.n_cells, 25);
        let model = crate::capacity::OpCostModel::default();
        let priced = crate::capacity::count_stats_with(&model, &bench, &plan).unwrap();
        assert_eq!(r.params, priced.params);
        let narrower = stack_plan(plan.n_cells, plan.init_channels - 1).unwrap();
        let under = crate::capacity::count_stats_with(&model, &bench, &narrower).unwrap();
        assert!(under.params < 1_500_000, "width not minimal");
    }

    #[test]
    fn snapshots_discretize_for_every_searched_method() {
        for method in Method::ALL {
            if method == Method::Random {
                continue;
            }
            let cfg = quick_cfg(method);
            let policy = PolicyId::Base;
            let spec = toy_space(policy);
            let dims = ToyDims {
                d: TOY_DIM,
                n_classes: TOY_CLASSES,
            };
            let task = ToyTask::generate(dims.d, dims.n_classes, 64, 64, 99);
            let mut search =
                ToySearch::new(method, cfg, spec, dims, task, 41).unwrap();
            search.run().unwrap();
            let snapshot = search.arch_snapshot().unwrap();
            snapshot.validate().unwrap();
            let genotype = discretize(&snapshot, policy).unwrap();
            genotype.validate().unwrap();
            let pruned = prune_removable(&genotype);
            assert!(is_valid(&pruned), "{method} discretized to an invalid net");
        }
    }

    #[test]
    fn searched_cells_prefer_signal_ops() {
        let signal = [OpKind::Uconv3D1, OpKind::Uconv5D1];
        let mut hits = 0;
        let seeds = [3u64, 5, 7, 11, 13];
        for &seed in &seeds {
            let cfg = SearchConfig::toy(Method::Darts);
            let r = run_trial(Method::Darts, PolicyId::Base, seed, &cfg).unwrap();
            let f = r.finalnet.unwrap();
            let cell = &f.cells[&CellKind::Normal];
            if cell
                .selections
                .iter()
                .any(|s| signal.contains(&s.op()))
            {
                hits += 1;
            }
        }
        assert!(hits >= 3, "signal ops selected in only {hits}/5 runs");
    }

    #[test]
    fn benchmark_duplication_covers_both_kinds() {
        let cfg = quick_cfg(Method::Random);
        let r = run_trial(Method::Random, PolicyId::Base, 17, &cfg).unwrap();
        let toy = r.finalnet.unwrap();
        let bench = benchmark_finalnet(&toy).unwrap();
        assert_eq!(bench.cells.len(), 2);
        assert_eq!(
            bench.cells[&CellKind::Normal],
            bench.cells[&CellKind::Reduction]
        );
        assert_eq!(bench.space.cell_kinds.len(), 2);
        bench.validate().unwrap();
    }

    #[test]
    fn seed_stream_is_uniform_range_and_distinct() {
        let seeds = draw_seeds(5, 424242);
        assert_eq!(seeds.len(), 5);
        assert!(seeds.iter().all(|&s| (1..=100_000).contains(&s)));
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        assert_eq!(seeds, draw_seeds(5, 424242));
        assert_ne!(seeds, draw_seeds(5, 424243));
        let many = draw_seeds(64, 1);
        assert!(many.iter().all(|&s| (1..=100_000).contains(&s)));
    }

    #[test]
    fn milenas_mixes_both_losses() {
        let mut cfg = quick_cfg(Method::Milenas);
        cfg.additional.insert("lambda".into(), 1.0);
        let a = run_trial(Method::Milenas, PolicyId::Base, 19, &cfg).unwrap();
        cfg.additional.insert("lambda".into(), 0.0);
        let b = run_trial(Method::Milenas, PolicyId::Base, 19, &cfg).unwrap();
        assert!(a.val_acc != b.val_acc || a.finalnet != b.finalnet);
    }

    #[test]
    fn gaea_rows_stay_on_simplex_through_training() {
        let cfg = quick_cfg(Method::GaeaErm);
        let spec = toy_space(PolicyId::Base);
        let dims = ToyDims {
            d: TOY_DIM,
            n_classes: TOY_CLASSES,
        };
        let task = ToyTask::generate(dims.d, dims.n_classes, 64, 64, 7);
        let mut search = ToySearch::new(Method::GaeaErm, cfg, spec, dims, task, 3).unwrap();
        search.run().unwrap();
        for row in &search.arch.node_rows {
            let sum: f64 = row.data.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            assert!(row.data.iter().all(|&w| w >= 0.0));
        }
        let ssb = search.arch.ssb.as_ref().unwrap();
        assert!((ssb.data.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
