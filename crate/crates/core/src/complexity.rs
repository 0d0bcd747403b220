//! Analytical parameter / MAC / FLOP accounting.
//!
//! Conventions:
//! * conv params `kh*kw*(cin/groups)*cout (+cout)`, MACs = weights x output pixels;
//! * dense params `in*out + out`, MACs `in*out`;
//! * batch norm params `2C` (running statistics excluded), MACs `2*H*W*C`;
//! * relu, add, replicate, pooling contribute FLOPs only, one per element
//!   touched (max pooling: one per window element);
//! * FLOPs = `convention * MACs` + elementwise FLOPs.
//!
//! The default pair (2 FLOPs per MAC, 512x512 input) reproduces the
//! published ResNet-50 figure of 42.72 GFLOPs; see [`calibrate`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ArchitectureGraph, FeatureShape, Layer, Node};

/// FLOPs counted per multiply-accumulate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopConvention {
    /// One FLOP per MAC.
    OneX,
    /// Two FLOPs per MAC (multiply and add).
    #[default]
    TwoX,
}

impl FlopConvention {
    pub fn factor(self) -> u64 {
        match self {
            FlopConvention::OneX => 1,
            FlopConvention::TwoX => 2,
        }
    }
}

impl std::str::FromStr for FlopConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1x" | "1" | "1xmac" => Ok(FlopConvention::OneX),
            "2x" | "2" | "2xmac" => Ok(FlopConvention::TwoX),
            _ => Err(Error::Argument(format!("unknown FLOP convention `{s}` (use 1x or 2x)"))),
        }
    }
}

pub const DEFAULT_RESOLUTION: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NodeCost {
    pub params: u64,
    pub macs: u64,
    /// FLOPs not expressed as MACs (activations, adds, pooling).
    pub elementwise_flops: u64,
}

/// Cost of one node for a single image.
pub fn node_complexity(node: &Node) -> NodeCost {
    let out = node.output_shape;
    let out_elems = out.numel() as u64;
    let input_elems: u64 = node.input_shapes.iter().map(|s| s.numel() as u64).sum();
    match &node.layer {
        Layer::Conv(p) => {
            let weights = p.weight_shape().numel() as u64;
            NodeCost {
                params: weights + if p.has_bias { p.out_channels as u64 } else { 0 },
                macs: weights * (out.h * out.w) as u64,
                elementwise_flops: 0,
            }
        }
        Layer::BatchNorm { channels, .. } => NodeCost {
            params: 2 * *channels as u64,
            macs: 2 * out_elems,
            elementwise_flops: 0,
        },
        Layer::Dense {
            in_features,
            units,
            bias,
        } => NodeCost {
            params: (*in_features * *units + if *bias { *units } else { 0 }) as u64,
            macs: (*in_features * *units) as u64,
            elementwise_flops: 0,
        },
        Layer::Relu | Layer::Add | Layer::Replicate { .. } => NodeCost {
            elementwise_flops: out_elems,
            ..NodeCost::default()
        },
        Layer::GlobalAvgPool => NodeCost {
            elementwise_flops: input_elems,
            ..NodeCost::default()
        },
        Layer::MaxPool { kernel, .. } => NodeCost {
            elementwise_flops: out_elems * (kernel.0 * kernel.1) as u64,
            ..NodeCost::default()
        },
        Layer::Concat | Layer::SoftmaxHead => NodeCost::default(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub name: String,
    pub op: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub output_shape: [usize; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub param_reduction_pct: f64,
    pub flop_reduction_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub name: String,
    pub input_shape: [usize; 3],
    pub convention: FlopConvention,
    pub per_node: Vec<NodeEntry>,
    pub totals: Totals,
}

/// `100 * (1 - a / b)`.
pub fn reduction_pct(a: f64, b: f64) -> f64 {
    100.0 * (1.0 - a / b)
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.totals.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.totals.flops as f64 / 1e9
    }

    /// Reductions of `self` relative to `baseline`.
    pub fn reduction_vs(&self, baseline: &ComplexityReport) -> Reductions {
        Reductions {
            param_reduction_pct: reduction_pct(self.totals.params as f64, baseline.totals.params as f64),
            flop_reduction_pct: reduction_pct(self.totals.flops as f64, baseline.totals.flops as f64),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Costs `graph`, optionally re-inferring shapes at another input resolution.
pub fn analyze_architecture(
    graph: &ArchitectureGraph,
    resolution: Option<(usize, usize)>,
    convention: FlopConvention,
) -> Result<ComplexityReport> {
    let resized;
    let graph = match resolution {
        Some((h, w)) if (h, w) != (graph.input_shape().h, graph.input_shape().w) => {
            resized = graph.with_input_resolution(h, w)?;
            &resized
        }
        _ => graph,
    };
    let mut per_node = Vec::with_capacity(graph.nodes().len());
    let mut totals = Totals::default();
    for node in graph.nodes() {
        let cost = node_complexity(node);
        let flops = convention.factor() * cost.macs + cost.elementwise_flops;
        let FeatureShape { h, w, c } = node.output_shape;
        per_node.push(NodeEntry {
            name: node.name.clone(),
            op: node.layer.kind().to_string(),
            params: cost.params,
            macs: cost.macs,
            flops,
            output_shape: [h, w, c],
        });
        totals.params += cost.params;
        totals.macs += cost.macs;
        totals.flops += flops;
    }
    let FeatureShape { h, w, c } = graph.input_shape();
    Ok(ComplexityReport {
        name: String::new(),
        input_shape: [h, w, c],
        convention,
        per_node,
        totals,
    })
}

/// One candidate of the resolution / convention calibration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationPoint {
    pub resolution: usize,
    pub convention: FlopConvention,
    pub gflops: f64,
    pub rel_err: f64,
}

/// Evaluates `graph` at each candidate resolution and convention against a
/// target GFLOP figure, best match first.
pub fn calibrate(
    graph: &ArchitectureGraph,
    resolutions: &[usize],
    target_gflops: f64,
) -> Result<Vec<CalibrationPoint>> {
    let mut points = Vec::new();
    for &r in resolutions {
        for convention in [FlopConvention::OneX, FlopConvention::TwoX] {
            let gflops = analyze_architecture(graph, Some((r, r)), convention)?.gflops();
            points.push(CalibrationPoint {
                resolution: r,
                convention,
                gflops,
                rel_err: (gflops - target_gflops).abs() / target_gflops,
            });
        }
    }
    points.sort_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
    Ok(points)
}

/// Table with "Parameters (M)" and "FLOPs (G)" columns, one row per report.
pub fn render_table(reports: &[&ComplexityReport]) -> String {
    let name_w = reports
        .iter()
        .map(|r| r.name.len())
        .chain(["Architecture".len()])
        .max()
        .unwrap_or(0);
    let mut out = format!(
        "{:<name_w$}  {:>14}  {:>9}\n",
        "Architecture", "Parameters (M)", "FLOPs (G)"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<name_w$}  {:>14.2}  {:>9.2}\n",
            r.name,
            r.params_millions(),
            r.gflops()
        ));
    }
    out
}

/// Per-node breakdown of one report.
pub fn render_breakdown(report: &ComplexityReport) -> String {
    let name_w = report
        .per_node
        .iter()
        .map(|e| e.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    let mut out = format!(
        "{:<name_w$}  {:<15}  {:>12}  {:>10}  {:>14}  {:>16}\n",
        "node", "op", "output", "params", "MACs", "FLOPs"
    );
    for e in &report.per_node {
        let [h, w, c] = e.output_shape;
        out.push_str(&format!(
            "{:<name_w$}  {:<15}  {:>12}  {:>10}  {:>14}  {:>16}\n",
            e.name,
            e.op,
            format!("{h}x{w}x{c}"),
            e.params,
            e.macs,
            e.flops
        ));
    }
    out.push_str(&format!(
        "{:<name_w$}  {:<15}  {:>12}  {:>10}  {:>14}  {:>16}\n",
        "total", "", "", report.totals.params, report.totals.macs, report.totals.flops
    ));
    out
}
