//! Analytic capacity accounting: parameters, multiply accumulates, and
//! conv depth of a finalnet under a stacking plan, plus the 1.5M-parameter
//! rescaling rule and the drop-path evaluation heuristic.
//!
//! The cost model prices one primitive as one depth-wise kxk kernel plus a
//! 1x1 channel mixer plus a normalization affine; the classic separable
//! conv stacks that structure twice. Pools and skips are free and preserve
//! their input width, so a map delivered by a free op keeps whatever width
//! its source had. A node that receives at least one conv takes the cell's
//! nominal width; free-op deliveries whose width disagrees with their
//! node's width are aligned by a priced 1x1 projection (the reduction-cell
//! convention). A net made only of free ops therefore carries the stem
//! width end to end and prices exactly stem plus classifier.
//!
//! Widths flow between cells the way the families wire them: the searched
//! family feeds each cell from the previous cell's two output blocks (a
//! missing block is substituted by the present one), while the classic
//! family feeds from the two preceding cells' single outputs.

use serde::Serialize;

use crate::discretize::is_valid;
use crate::space::{CellKind, Finalnet, OpKind, PolicyId, SpaceFamily, StackPlan};
use crate::{LhdError, Result};

/// Parameter budget targeted by the `1m` policy.
pub const PARAM_TARGET_1M: u64 = 1_500_000;

/// Channel cap for the rescaling search.
pub const CHANNEL_CAP: usize = 4096;

/// Cost constants for individual ops.
#[derive(Debug, Clone)]
pub struct OpCostModel {
    pub n_classes: u64,
    pub input_resolution: u64,
}

impl Default for OpCostModel {
    fn default() -> Self {
        OpCostModel {
            n_classes: 10,
            input_resolution: 32,
        }
    }
}

/// Cost of one op application.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCost {
    pub params: u64,
    pub macs: u64,
    pub conv_layers: u64,
    /// Width of the map the op delivers.
    pub out_width: u64,
}

impl OpCostModel {
    fn kernel(op: OpKind) -> u64 {
        match op {
            OpKind::Uconv3D1 | OpKind::Uconv3D2 | OpKind::SepConv3 | OpKind::DilConv3 => 3,
            OpKind::Uconv5D1 | OpKind::Uconv5D2 | OpKind::SepConv5 | OpKind::DilConv5 => 5,
            _ => 0,
        }
    }

    /// Prices `op` applied to a `c_in`-wide map, producing either the
    /// nominal width (convs) or the input width (free ops). `spatial` is
    /// the output side length.
    pub fn op_cost(&self, op: OpKind, c_in: u64, c_nominal: u64, spatial: u64) -> OpCost {
        let area = spatial * spatial;
        match op {
            OpKind::Skip => OpCost {
                out_width: c_in,
                ..OpCost::default()
            },
            OpKind::MaxPool3 | OpKind::AvgPool3 => OpCost {
                macs: area * c_in * 9,
                out_width: c_in,
                ..OpCost::default()
            },
            OpKind::Uconv3D1 | OpKind::Uconv5D1 | OpKind::Uconv3D2 | OpKind::Uconv5D2
            | OpKind::DilConv3 | OpKind::DilConv5 => {
                let k = Self::kernel(op);
                OpCost {
                    params: c_in * k * k + c_in * c_nominal + 2 * c_nominal,
                    macs: area * (c_in * k * k + c_in * c_nominal),
                    conv_layers: 1,
                    out_width: c_nominal,
                }
            }
            OpKind::SepConv3 | OpKind::SepConv5 => {
                let k = Self::kernel(op);
                let stage1 = c_in * k * k + c_in * c_nominal + 2 * c_nominal;
                let stage2 = c_nominal * k * k + c_nominal * c_nominal + 2 * c_nominal;
                OpCost {
                    params: stage1 + stage2,
                    macs: area
                        * (c_in * k * k
                            + c_in * c_nominal
                            + c_nominal * k * k
                            + c_nominal * c_nominal),
                    conv_layers: 2,
                    out_width: c_nominal,
                }
            }
        }
    }

    /// 1x1 width-alignment projection. Not counted as conv depth.
    fn projection(&self, c_in: u64, c_out: u64, spatial: u64) -> OpCost {
        OpCost {
            params: c_in * c_out + 2 * c_out,
            macs: spatial * spatial * c_in * c_out,
            conv_layers: 0,
            out_width: c_out,
        }
    }
}

/// Totals for a stacked network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NetworkStats {
    pub params: u64,
    /// Parameters inside cells only (stem and classifier excluded).
    pub conv_params: u64,
    pub macs: u64,
    /// Sequential conv layers on the longest input-to-output path, stem
    /// excluded.
    pub depth: u64,
}

#[derive(Debug, Clone, Copy)]
struct Feed {
    width: u64,
    depth: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Totals {
    params: u64,
    conv_params: u64,
    macs: u64,
}

impl Totals {
    fn add(&mut self, cost: &OpCost, cell: bool) {
        self.params += cost.params;
        if cell {
            self.conv_params += cost.params;
        }
        self.macs += cost.macs;
    }
}

fn cell_outputs(
    model: &OpCostModel,
    finalnet: &Finalnet,
    kind: CellKind,
    nominal: u64,
    spatial_out: u64,
    reduction: bool,
    input0: Feed,
    input1: Feed,
    totals: &mut Totals,
) -> Result<(Option<Feed>, Option<Feed>)> {
    let spec = &finalnet.space;
    let cell = finalnet.cells.get(&kind).ok_or_else(|| {
        LhdError::InvalidCapacity(format!("finalnet lacks a '{kind}' cell"))
    })?;
    let _ = reduction;
    let mut node_state: Vec<Option<Feed>> = vec![None; spec.n_nodes()];
    node_state[0] = Some(input0);
    node_state[1] = Some(input1);

    for node in spec.intermediate_nodes() {
        let deliveries: Vec<_> = cell
            .selections
            .iter()
            .filter(|s| s.dst() == node)
            .collect();
        if deliveries.is_empty() {
            continue;
        }
        let mut costs = Vec::new();
        let mut width = 0u64;
        let mut any_conv = false;
        for sel in &deliveries {
            let src = node_state[sel.src()].ok_or_else(|| {
                LhdError::InvalidCapacity(format!(
                    "selection reads node {} before it is produced",
                    sel.src()
                ))
            })?;
            let cost = model.op_cost(sel.op(), src.width, nominal, spatial_out);
            any_conv |= sel.op().is_conv();
            width = width.max(cost.out_width);
            costs.push((src, cost));
        }
        if any_conv {
            width = nominal;
        }
        let mut depth = 0u64;
        for (src, cost) in &costs {
            totals.add(cost, true);
            if cost.out_width != width {
                let proj = model.projection(cost.out_width, width, spatial_out);
                totals.add(&proj, true);
            }
            depth = depth.max(src.depth + cost.conv_layers);
        }
        node_state[node] = Some(Feed { width, depth });
    }

    let collect = |ids: &[usize]| -> Result<Vec<Feed>> {
        ids.iter()
            .map(|&id| {
                node_state[id].ok_or_else(|| {
                    LhdError::InvalidCapacity(format!("kept node {id} has no inputs"))
                })
            })
            .collect()
    };

    let ssb = if cell.ssb.is_empty() {
        None
    } else {
        let feeds = collect(&cell.ssb)?;
        let width = feeds.iter().map(|f| f.width).max().unwrap();
        for f in &feeds {
            if f.width != width {
                let proj = model.projection(f.width, width, spatial_out);
                totals.add(&proj, true);
            }
        }
        let depth = feeds.iter().map(|f| f.depth).max().unwrap();
        Some(Feed { width, depth })
    };

    let csb = if cell.csb.is_empty() {
        None
    } else {
        let feeds = collect(&cell.csb)?;
        let concat: u64 = feeds.iter().map(|f| f.width).sum();
        let mixer = OpCost {
            params: concat * nominal + 2 * nominal,
            macs: spatial_out * spatial_out * concat * nominal,
            conv_layers: 1,
            out_width: nominal,
        };
        totals.add(&mixer, true);
        let depth = feeds.iter().map(|f| f.depth).max().unwrap() + 1;
        Some(Feed {
            width: nominal,
            depth,
        })
    };

    if ssb.is_none() && csb.is_none() {
        return Err(LhdError::InvalidCapacity(format!(
            "cell '{kind}' keeps no output paths"
        )));
    }
    Ok((ssb, csb))
}

/// Prices a finalnet stacked under `plan` at the model's input resolution.
pub fn count_stats_with(
    model: &OpCostModel,
    finalnet: &Finalnet,
    plan: &StackPlan,
) -> Result<NetworkStats> {
    finalnet.validate()?;
    if !is_valid(finalnet) {
        return Err(LhdError::InvalidCapacity(
            "finalnet has no path from an input to a kept output".into(),
        ));
    }
    let mut totals = Totals::default();
    let c0 = plan.init_channels as u64;
    let r = model.input_resolution;
    let stem = OpCost {
        params: 27 * c0 + 2 * c0,
        macs: r * r * 27 * c0,
        conv_layers: 0,
        out_width: c0,
    };
    totals.add(&stem, false);

    let widths = plan.cell_widths();
    let stem_feed = Feed {
        width: c0,
        depth: 0,
    };
    // Searched family: (previous SSB, previous CSB). Classic family: the two
    // preceding cells' outputs.
    let mut feed_a = stem_feed;
    let mut feed_b = stem_feed;
    let mut last = (Some(stem_feed), Some(stem_feed));
    let mut spatial = r;
    for idx in 0..plan.n_cells {
        let kind = plan.kind_of_cell(idx);
        let reduction = kind == CellKind::Reduction;
        if reduction {
            spatial = (spatial / 2).max(1);
        }
        let nominal = widths[idx] as u64;
        let (out0, out1) = cell_outputs(
            model,
            finalnet,
            kind,
            nominal,
            spatial,
            reduction,
            feed_a,
            feed_b,
            &mut totals,
        )?;
        last = (out0, out1);
        match finalnet.space.family {
            SpaceFamily::Lhd => {
                // A missing block is substituted by the present one, so the
                // next cell still sees two inputs.
                feed_a = out0.or(out1).expect("at least one output");
                feed_b = out1.or(out0).expect("at least one output");
            }
            SpaceFamily::Dss => {
                let out = out1.or(out0).expect("at least one output");
                feed_a = feed_b;
                feed_b = out;
            }
        }
    }

    // The classifier reads the present outputs of the final cell only.
    let head: Vec<Feed> = match finalnet.space.family {
        SpaceFamily::Lhd => [last.0, last.1].into_iter().flatten().collect(),
        SpaceFamily::Dss => vec![feed_b],
    };
    let head_width: u64 = head.iter().map(|f| f.width).sum();
    let depth = head.iter().map(|f| f.depth).max().unwrap_or(0);
    let classifier = OpCost {
        params: head_width * model.n_classes + model.n_classes,
        macs: head_width * model.n_classes,
        conv_layers: 0,
        out_width: model.n_classes,
    };
    totals.add(&classifier, false);

    Ok(NetworkStats {
        params: totals.params,
        conv_params: totals.conv_params,
        macs: totals.macs,
        depth,
    })
}

/// [`count_stats_with`] under the default cost model.
pub fn count_stats(finalnet: &Finalnet, plan: &StackPlan) -> Result<NetworkStats> {
    count_stats_with(&OpCostModel::default(), finalnet, plan)
}

/// Smallest init_channels whose 25-cell stack reaches the 1.5M parameter
/// budget. Width-independent nets (all free ops capped at the stem width)
/// cannot reach it and are rejected.
pub fn scale_to_1m(finalnet: &Finalnet) -> Result<StackPlan> {
    let model = OpCostModel::default();
    let params_at = |c: usize| -> Result<u64> {
        let plan = crate::space::stack_plan(25, c)?;
        Ok(count_stats_with(&model, finalnet, &plan)?.params)
    };
    if params_at(CHANNEL_CAP)? < PARAM_TARGET_1M {
        return Err(LhdError::InvalidCapacity(format!(
            "net cannot reach {PARAM_TARGET_1M} params within {CHANNEL_CAP} channels"
        )));
    }
    let mut lo = 1usize;
    let mut hi = CHANNEL_CAP;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if params_at(mid)? >= PARAM_TARGET_1M {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    crate::space::stack_plan(25, lo)
}

/// Benchmark datasets the evaluation recipe covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    C10,
    C100,
    Svhn,
}

impl std::str::FromStr for Dataset {
    type Err = LhdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c10" | "cifar10" => Ok(Dataset::C10),
            "c100" | "cifar100" => Ok(Dataset::C100),
            "svhn" => Ok(Dataset::Svhn),
            other => Err(LhdError::InvalidCapacity(format!(
                "unknown dataset '{other}' (expected c10, c100, or svhn)"
            ))),
        }
    }
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dataset::C10 => write!(f, "c10"),
            Dataset::C100 => write!(f, "c100"),
            Dataset::Svhn => write!(f, "svhn"),
        }
    }
}

/// Drop-path rate: the per-dataset coefficient times the number of
/// connections into the concatenated output.
pub fn drop_path_rate(i: f64, connections: u64) -> Result<f64> {
    if !(i >= 0.0) {
        return Err(LhdError::InvalidCapacity(format!(
            "drop-path coefficient must be nonnegative, got {i}"
        )));
    }
    Ok(i * connections as f64)
}

/// Per-condition drop-path coefficient: 0.01 on the ten-class set, raised
/// by half for the rescaled policy, doubled on the other two datasets.
pub fn recipe_i(dataset: Dataset, policy: PolicyId) -> Result<f64> {
    let base = match policy {
        PolicyId::Base | PolicyId::ThreeOps | PolicyId::FourOut => 0.01,
        PolicyId::OneM => 0.015,
        PolicyId::Original => {
            return Err(LhdError::InvalidPolicy(
                "the drop-path recipe covers the searched-family policies only".into(),
            ));
        }
    };
    Ok(match dataset {
        Dataset::C10 => base,
        Dataset::C100 | Dataset::Svhn => 2.0 * base,
    })
}
