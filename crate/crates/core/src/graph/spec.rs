//! Declarative architecture description as it appears in config files.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Padding;

/// Reserved value name for the network input.
pub const INPUT: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv,
    Batchnorm,
    Relu,
    Dense,
    GlobalAvgPool,
    MaxPool,
    Add,
    Concat,
    Replicate,
    SoftmaxHead,
    Prpe,
    PrpeS,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv,
        OpKind::Batchnorm,
        OpKind::Relu,
        OpKind::Dense,
        OpKind::GlobalAvgPool,
        OpKind::MaxPool,
        OpKind::Add,
        OpKind::Concat,
        OpKind::Replicate,
        OpKind::SoftmaxHead,
        OpKind::Prpe,
        OpKind::PrpeS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::Batchnorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Dense => "dense",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::MaxPool => "max_pool",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::Replicate => "replicate",
            OpKind::SoftmaxHead => "softmax_head",
            OpKind::Prpe => "prpe",
            OpKind::PrpeS => "prpe_s",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown op kind `{s}`"))
    }
}

/// Op-specific attributes. Which fields are meaningful depends on the op.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    /// Shorthand for `groups == in_channels == out_channels`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depthwise: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    /// Replication factor (replicate, prpe, prpe_s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    /// Projection width (prpe, prpe_s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_proj: Option<usize>,
    /// Expansion width (prpe, prpe_s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<usize>,
}

impl Attrs {
    pub(crate) fn require(&self, node: &str, field: &str, v: Option<usize>) -> Result<usize> {
        v.ok_or_else(|| Error::config(node, format!("missing attribute `{field}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub op: OpKind,
    #[serde(default, skip_serializing_if = "is_default_attrs")]
    pub attrs: Attrs,
    #[serde(default)]
    pub inputs: Vec<String>,
}

fn is_default_attrs(a: &Attrs) -> bool {
    *a == Attrs::default()
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, op: OpKind, attrs: Attrs, inputs: &[&str]) -> Self {
        NodeSpec {
            name: name.into(),
            op,
            attrs,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Top-level config document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// `[H, W, C]`.
    pub input_shape: [usize; 3],
    pub nodes: Vec<NodeSpec>,
    pub output: String,
}

#[derive(Deserialize)]
struct RawConfig {
    input_shape: [usize; 3],
    nodes: Vec<serde_json::Value>,
    output: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    name: String,
    op: String,
    #[serde(default)]
    attrs: Option<serde_json::Value>,
    #[serde(default)]
    inputs: Vec<String>,
}

impl ArchitectureConfig {
    /// Parses the JSON text of a config without validating the graph.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)
            .map_err(|e| Error::config("<config>", format!("malformed config: {e}")))?;
        let mut nodes = Vec::with_capacity(raw.nodes.len());
        for (i, value) in raw.nodes.into_iter().enumerate() {
            let label = value
                .get("name")
                .and_then(|n| n.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("<node #{i}>"));
            let node: RawNode = serde_json::from_value(value)
                .map_err(|e| Error::config(&label, format!("malformed node: {e}")))?;
            let op = node
                .op
                .parse::<OpKind>()
                .map_err(|reason| Error::config(&label, reason))?;
            let attrs = match node.attrs {
                None | Some(serde_json::Value::Null) => Attrs::default(),
                Some(v) => serde_json::from_value(v)
                    .map_err(|e| Error::config(&label, format!("bad attrs: {e}")))?,
            };
            nodes.push(NodeSpec {
                name: node.name,
                op,
                attrs,
                inputs: node.inputs,
            });
        }
        Ok(ArchitectureConfig {
            input_shape: raw.input_shape,
            nodes,
            output: raw.output,
        })
    }

    /// Serializes with one node per line, the layout of the bundled files.
    pub fn to_json(&self) -> String {
        let [h, w, c] = self.input_shape;
        let nodes: Vec<String> = self
            .nodes
            .iter()
            .map(|n| format!("    {}", serde_json::to_string(n).expect("node serializes")))
            .collect();
        format!(
            "{{\n  \"input_shape\": [{h}, {w}, {c}],\n  \"nodes\": [\n{}\n  ],\n  \"output\": {}\n}}\n",
            nodes.join(",\n"),
            serde_json::to_string(&self.output).expect("string serializes")
        )
    }
}
