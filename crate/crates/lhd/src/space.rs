//! Search-space IR: operation menus, space declarations, supernet graphs,
//! cell stacking plans, and the discrete genotype interchange types.
//!
//! Two families are covered. `Dss` is the classic four-node cell whose edges
//! carry separable and dilated convolutions and whose output concatenates
//! every intermediate node. `Lhd` is the five-node variant with unified
//! convolution primitives, compound edges that keep every candidate op in
//! parallel, and two searchable output blocks: a summed block (SSB) and a
//! concatenated block behind a 1x1 mixer (CSB).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{LhdError, Result};

/// Number of cell input nodes. Both families feed each cell from the two
/// preceding cell outputs.
pub const N_INPUTS: usize = 2;

/// Upper bound on intermediate nodes per cell. Keeps every loop that walks
/// nodes or (source, op) pairs small even for adversarial inputs.
pub const MAX_INTERMEDIATE: usize = 64;

/// Search-space family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceFamily {
    Dss,
    Lhd,
}

impl SpaceFamily {
    /// Full candidate-op menu for the family, in canonical order. A space
    /// with `n_ops = M` uses the first `M` entries.
    pub fn op_menu(self) -> &'static [OpKind] {
        match self {
            SpaceFamily::Lhd => &[
                OpKind::Skip,
                OpKind::MaxPool3,
                OpKind::AvgPool3,
                OpKind::Uconv3D1,
                OpKind::Uconv5D1,
                OpKind::Uconv3D2,
                OpKind::Uconv5D2,
            ],
            SpaceFamily::Dss => &[
                OpKind::Skip,
                OpKind::MaxPool3,
                OpKind::AvgPool3,
                OpKind::SepConv3,
                OpKind::SepConv5,
                OpKind::DilConv3,
                OpKind::DilConv5,
            ],
        }
    }
}

impl std::fmt::Display for SpaceFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpaceFamily::Dss => write!(f, "dss"),
            SpaceFamily::Lhd => write!(f, "lhd"),
        }
    }
}

/// Candidate operation. The unified convolutions are depth-wise kxk kernels
/// (k in {3,5}, dilation in {1,2}) followed by a 1x1 channel mixer; the
/// separable/dilated convolutions are their two-stack counterparts from the
/// classic space. There is no `none` op: path removal is the job of the
/// output blocks and pruning, not of the edge menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Skip,
    MaxPool3,
    AvgPool3,
    Uconv3D1,
    Uconv5D1,
    Uconv3D2,
    Uconv5D2,
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
}

impl OpKind {
    /// True for ops that carry trainable kernels.
    pub fn is_conv(self) -> bool {
        !matches!(self, OpKind::Skip | OpKind::MaxPool3 | OpKind::AvgPool3)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            OpKind::Skip => "skip",
            OpKind::MaxPool3 => "max_pool_3",
            OpKind::AvgPool3 => "avg_pool_3",
            OpKind::Uconv3D1 => "uconv_3_d1",
            OpKind::Uconv5D1 => "uconv_5_d1",
            OpKind::Uconv3D2 => "uconv_3_d2",
            OpKind::Uconv5D2 => "uconv_5_d2",
            OpKind::SepConv3 => "sep_conv_3",
            OpKind::SepConv5 => "sep_conv_5",
            OpKind::DilConv3 => "dil_conv_3",
            OpKind::DilConv5 => "dil_conv_5",
        };
        write!(f, "{name}")
    }
}

/// Cell role inside a stack. Reduction cells halve spatial size and double
/// the nominal channel width.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduction,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellKind::Normal => write!(f, "normal"),
            CellKind::Reduction => write!(f, "reduction"),
        }
    }
}

/// Declaration of a search space: family, node count, op-menu size, and
/// which cell kinds are searched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub family: SpaceFamily,
    pub n_intermediate: usize,
    pub n_ops: usize,
    pub cell_kinds: Vec<CellKind>,
}

impl SpaceSpec {
    /// The default five-node unified-conv space.
    pub fn lhd() -> Self {
        SpaceSpec {
            family: SpaceFamily::Lhd,
            n_intermediate: 5,
            n_ops: 7,
            cell_kinds: vec![CellKind::Normal, CellKind::Reduction],
        }
    }

    /// The classic four-node space.
    pub fn dss() -> Self {
        SpaceSpec {
            family: SpaceFamily::Dss,
            n_intermediate: 4,
            n_ops: 7,
            cell_kinds: vec![CellKind::Normal, CellKind::Reduction],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_intermediate == 0 {
            return Err(LhdError::InvalidSpace(
                "n_intermediate must be at least 1".into(),
            ));
        }
        if self.n_intermediate > MAX_INTERMEDIATE {
            return Err(LhdError::InvalidSpace(format!(
                "n_intermediate {} exceeds the supported cap of {MAX_INTERMEDIATE}",
                self.n_intermediate
            )));
        }
        if self.n_ops == 0 {
            return Err(LhdError::InvalidSpace("n_ops must be at least 1".into()));
        }
        let menu = self.family.op_menu().len();
        if self.n_ops > menu {
            return Err(LhdError::InvalidSpace(format!(
                "n_ops {} exceeds the {} menu of {} candidates",
                self.n_ops, self.family, menu
            )));
        }
        if self.cell_kinds.is_empty() {
            return Err(LhdError::InvalidSpace("cell_kinds must be nonempty".into()));
        }
        let mut seen = self.cell_kinds.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.cell_kinds.len() {
            return Err(LhdError::InvalidSpace("duplicate cell kind".into()));
        }
        Ok(())
    }

    /// Candidate ops available in this space, in canonical order.
    pub fn ops(&self) -> &'static [OpKind] {
        &self.family.op_menu()[..self.n_ops]
    }

    /// Index of an op within this space's menu.
    pub fn op_index(&self, op: OpKind) -> Option<usize> {
        self.ops().iter().position(|&o| o == op)
    }

    /// Total node count: two inputs plus the intermediates.
    pub fn n_nodes(&self) -> usize {
        N_INPUTS + self.n_intermediate
    }

    /// Node ids of the intermediate nodes, in topological order.
    pub fn intermediate_nodes(&self) -> std::ops::Range<usize> {
        N_INPUTS..self.n_nodes()
    }

    pub fn is_intermediate(&self, node: usize) -> bool {
        (N_INPUTS..self.n_nodes()).contains(&node)
    }

    /// Predecessors of a node: every node with a smaller id.
    pub fn preds_of(&self, node: usize) -> std::ops::Range<usize> {
        0..node
    }

    /// Number of incoming compound edges of an intermediate node.
    pub fn pred_count(&self, node: usize) -> usize {
        node
    }

    /// Number of compound edges in one cell: sum of predecessor counts.
    pub fn n_edges(&self) -> usize {
        self.intermediate_nodes().sum()
    }

    /// Number of (source, op) pairs feeding one intermediate node.
    pub fn n_pairs(&self, node: usize) -> usize {
        self.pred_count(node) * self.n_ops
    }

    /// Flat index of a (source, op) pair in a node's input row. Pairs are
    /// ordered by source, then op, which is also the tie-break order.
    pub fn pair_index(&self, src: usize, op_idx: usize) -> usize {
        src * self.n_ops + op_idx
    }

    /// Inverse of [`SpaceSpec::pair_index`].
    pub fn pair_of(&self, flat: usize) -> (usize, usize) {
        (flat / self.n_ops, flat % self.n_ops)
    }
}

/// One compound edge of the supernet: all candidate ops from `src` to `dst`
/// in parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompoundEdge {
    pub src: usize,
    pub dst: usize,
}

/// How a cell exposes its result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputBlocks {
    /// Two searchable blocks with one path per intermediate node: a softmax
    /// weighted sum and an independently gated concatenation behind a 1x1
    /// mixer.
    Searchable { ssb_paths: usize, csb_paths: usize },
    /// Fixed concatenation of all intermediate nodes.
    FixedConcat { paths: usize },
}

/// Assembled supernet graph for one cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupernetGraph {
    pub spec: SpaceSpec,
    pub edges: Vec<CompoundEdge>,
    pub outputs: OutputBlocks,
}

/// Builds the supernet for one cell of the given space: every intermediate
/// node receives a compound edge from each of its predecessors, and the
/// output blocks match the family.
pub fn build_supernet(spec: &SpaceSpec) -> Result<SupernetGraph> {
    spec.validate()?;
    let mut edges = Vec::with_capacity(spec.n_edges());
    for dst in spec.intermediate_nodes() {
        for src in spec.preds_of(dst) {
            edges.push(CompoundEdge { src, dst });
        }
    }
    let n = spec.n_intermediate;
    let outputs = match spec.family {
        SpaceFamily::Lhd => OutputBlocks::Searchable {
            ssb_paths: n,
            csb_paths: n,
        },
        SpaceFamily::Dss => OutputBlocks::FixedConcat { paths: n },
    };
    Ok(SupernetGraph {
        spec: spec.clone(),
        edges,
        outputs,
    })
}

/// How cells stack into a full network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackPlan {
    pub n_cells: usize,
    pub init_channels: usize,
    pub reduction_positions: Vec<usize>,
}

/// Places reduction cells at one third and two thirds of the stack, the
/// standard evaluation convention.
pub fn stack_plan(n_cells: usize, init_channels: usize) -> Result<StackPlan> {
    if n_cells < 3 {
        return Err(LhdError::InvalidSpace(format!(
            "a stack needs at least 3 cells, got {n_cells}"
        )));
    }
    if init_channels == 0 {
        return Err(LhdError::InvalidSpace("init_channels must be positive".into()));
    }
    Ok(StackPlan {
        n_cells,
        init_channels,
        reduction_positions: vec![n_cells / 3, 2 * n_cells / 3],
    })
}

impl StackPlan {
    pub fn kind_of_cell(&self, idx: usize) -> CellKind {
        if self.reduction_positions.contains(&idx) {
            CellKind::Reduction
        } else {
            CellKind::Normal
        }
    }

    /// Nominal channel width of each cell: doubles at every reduction.
    pub fn cell_widths(&self) -> Vec<usize> {
        let mut w = self.init_channels;
        (0..self.n_cells)
            .map(|i| {
                if self.kind_of_cell(i) == CellKind::Reduction {
                    w *= 2;
                }
                w
            })
            .collect()
    }
}

/// Discretization policy identifier carried by genotypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyId {
    /// Top-2 ops per node, thresholded output paths.
    #[serde(rename = "base")]
    Base,
    /// Same topology rules as `Base`; the stack is rescaled to a 1.5M
    /// parameter budget with 25 cells.
    #[serde(rename = "1m")]
    OneM,
    /// Top-3 ops per node, thresholded output paths.
    #[serde(rename = "3ops")]
    ThreeOps,
    /// Top-2 ops per node and top-4 paths in both output blocks.
    #[serde(rename = "4out")]
    FourOut,
    /// Classic-space rule: top-2 ops from distinct edges, fixed dense output.
    #[serde(rename = "original")]
    Original,
}

impl std::fmt::Display for PolicyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PolicyId::Base => "base",
            PolicyId::OneM => "1m",
            PolicyId::ThreeOps => "3ops",
            PolicyId::FourOut => "4out",
            PolicyId::Original => "original",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for PolicyId {
    type Err = LhdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(PolicyId::Base),
            "1m" => Ok(PolicyId::OneM),
            "3ops" => Ok(PolicyId::ThreeOps),
            "4out" => Ok(PolicyId::FourOut),
            "original" => Ok(PolicyId::Original),
            other => Err(LhdError::InvalidPolicy(format!(
                "unknown policy '{other}' (expected base, 1m, 3ops, 4out, or original)"
            ))),
        }
    }
}

/// One selected op: `dst` consumes `src` through `op`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Selection(pub usize, pub usize, pub OpKind);

impl Selection {
    pub fn dst(&self) -> usize {
        self.0
    }
    pub fn src(&self) -> usize {
        self.1
    }
    pub fn op(&self) -> OpKind {
        self.2
    }
}

/// Discrete architecture of one cell: selected ops plus the node ids kept by
/// each output block. `ssb`/`csb` are sorted and duplicate-free. For the
/// classic family the dense output is recorded in `csb` and `ssb` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub selections: Vec<Selection>,
    pub ssb: Vec<usize>,
    pub csb: Vec<usize>,
}

impl CellGenotype {
    /// Node ids kept by at least one output block.
    pub fn kept_nodes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.ssb.iter().chain(self.csb.iter()).copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Discretized architecture before pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub space: SpaceSpec,
    pub policy: PolicyId,
    pub cells: BTreeMap<CellKind, CellGenotype>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A pruned genotype: the interchange format consumed by capacity
/// accounting, toy retraining, and the CLI. `removed` lists the intermediate
/// nodes deleted by pruning, per cell kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalnet {
    pub space: SpaceSpec,
    pub policy: PolicyId,
    pub cells: BTreeMap<CellKind, CellGenotype>,
    pub removed: Vec<(CellKind, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn validate_cells(
    space: &SpaceSpec,
    cells: &BTreeMap<CellKind, CellGenotype>,
) -> Result<()> {
    space.validate()?;
    for kind in &space.cell_kinds {
        if !cells.contains_key(kind) {
            return Err(LhdError::InvalidGenotype(format!(
                "missing cell genotype for kind '{kind}'"
            )));
        }
    }
    for (kind, cell) in cells {
        if !space.cell_kinds.contains(kind) {
            return Err(LhdError::InvalidGenotype(format!(
                "cell kind '{kind}' is not part of the space"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for sel in &cell.selections {
            if !space.is_intermediate(sel.dst()) {
                return Err(LhdError::InvalidGenotype(format!(
                    "selection destination {} is not an intermediate node",
                    sel.dst()
                )));
            }
            if sel.src() >= sel.dst() {
                return Err(LhdError::InvalidGenotype(format!(
                    "selection source {} must precede destination {}",
                    sel.src(),
                    sel.dst()
                )));
            }
            if space.op_index(sel.op()).is_none() {
                return Err(LhdError::InvalidGenotype(format!(
                    "op '{}' is outside the space's menu",
                    sel.op()
                )));
            }
            if !seen.insert(*sel) {
                return Err(LhdError::InvalidGenotype(format!(
                    "duplicate selection ({}, {}, {})",
                    sel.dst(),
                    sel.src(),
                    sel.op()
                )));
            }
        }
        for list in [&cell.ssb, &cell.csb] {
            for pair in list.windows(2) {
                if pair[0] >= pair[1] {
                    return Err(LhdError::InvalidGenotype(
                        "kept output paths must be sorted and unique".into(),
                    ));
                }
            }
            for &node in list {
                if !space.is_intermediate(node) {
                    return Err(LhdError::InvalidGenotype(format!(
                        "kept output path {node} is not an intermediate node"
                    )));
                }
            }
        }
    }
    Ok(())
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        validate_cells(&self.space, &self.cells)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)
            .map_err(|e| LhdError::MalformedInput(format!("genotype json: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }
}

impl Finalnet {
    pub fn validate(&self) -> Result<()> {
        validate_cells(&self.space, &self.cells)?;
        for &(kind, node) in &self.removed {
            if !self.space.is_intermediate(node) {
                return Err(LhdError::InvalidGenotype(format!(
                    "removed node {node} is not an intermediate node"
                )));
            }
            let cell = self.cells.get(&kind).ok_or_else(|| {
                LhdError::InvalidGenotype(format!("removed entry for unknown cell '{kind}'"))
            })?;
            if cell.kept_nodes().contains(&node) {
                return Err(LhdError::InvalidGenotype(format!(
                    "node {node} is both removed and kept in cell '{kind}'"
                )));
            }
            for sel in &cell.selections {
                if sel.dst() == node || sel.src() == node {
                    return Err(LhdError::InvalidGenotype(format!(
                        "removed node {node} still appears in a selection of cell '{kind}'"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: Finalnet = serde_json::from_str(text)
            .map_err(|e| LhdError::MalformedInput(format!("finalnet json: {e}")))?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finalnet serializes")
    }
}
