//! Architecture graphs: config parsing, PRPE expansion, shape inference,
//! execution and checkpoints.

mod checkpoint;
mod exec;
mod params;
pub mod prpe;
pub mod resnet;
pub mod spec;

use std::collections::HashMap;

pub use checkpoint::{Checkpoint, NamedTensor, TensorData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use exec::{ForwardPass, Gradients};
pub use params::{Param, ParamSlot, ParamStore};
pub use prpe::expand_prpe_block;
pub use resnet::build_resnet50;
pub use spec::{ArchitectureConfig, Attrs, NodeSpec, OpKind, INPUT};

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Padding};

/// Bundled configs, addressable by file name.
pub const BUNDLED_CONFIGS: [(&str, &str); 3] = [
    ("covidnet-ct.json", include_str!("../../configs/covidnet-ct.json")),
    ("covidnet-ct-mini.json", include_str!("../../configs/covidnet-ct-mini.json")),
    ("resnet50.json", include_str!("../../configs/resnet50.json")),
];

/// Looks up a bundled config by file name, with or without `.json`.
pub fn bundled_config(name: &str) -> Option<&'static str> {
    let file = std::path::Path::new(name)
        .file_name()
        .and_then(|f| f.to_str())
        .unwrap_or(name);
    BUNDLED_CONFIGS
        .iter()
        .find(|(n, _)| *n == file || n.trim_end_matches(".json") == file)
        .map(|(_, text)| *text)
}

/// Spatial and channel extent of a node output, batch excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }
}

impl std::fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// A primitive layer with its channel counts resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    BatchNorm { channels: usize, epsilon: f64, momentum: f64 },
    Relu,
    Dense { in_features: usize, units: usize, bias: bool },
    GlobalAvgPool,
    MaxPool { kernel: (usize, usize), stride: (usize, usize), padding: Padding },
    Add,
    Concat,
    Replicate { r: usize },
    SoftmaxHead,
}

impl Layer {
    pub fn kind(&self) -> OpKind {
        match self {
            Layer::Conv(_) => OpKind::Conv,
            Layer::BatchNorm { .. } => OpKind::Batchnorm,
            Layer::Relu => OpKind::Relu,
            Layer::Dense { .. } => OpKind::Dense,
            Layer::GlobalAvgPool => OpKind::GlobalAvgPool,
            Layer::MaxPool { .. } => OpKind::MaxPool,
            Layer::Add => OpKind::Add,
            Layer::Concat => OpKind::Concat,
            Layer::Replicate { .. } => OpKind::Replicate,
            Layer::SoftmaxHead => OpKind::SoftmaxHead,
        }
    }
}

/// One primitive node after expansion and shape inference.
#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    /// Value ids: 0 is the network input, `i + 1` is the output of node `i`.
    pub inputs: Vec<usize>,
    pub input_shapes: Vec<FeatureShape>,
    pub output_shape: FeatureShape,
    /// Enclosing PRPE block, if this node came from one.
    pub block: Option<String>,
}

/// Validated DAG of primitive nodes in topological order.
#[derive(Clone, Debug)]
pub struct ArchitectureGraph {
    config: ArchitectureConfig,
    nodes: Vec<Node>,
    output: usize,
}

impl ArchitectureGraph {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_config(ArchitectureConfig::from_json(text)?)
    }

    /// Parses a bundled config by name.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = bundled_config(name)
            .ok_or_else(|| Error::config(name, "no bundled config with this name"))?;
        Self::parse(text)
    }

    pub fn from_config(config: ArchitectureConfig) -> Result<Self> {
        let [h, w, c] = config.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config(INPUT, "input_shape entries must be positive"));
        }
        let declared: HashMap<&str, usize> = config
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        if declared.len() != config.nodes.len() || declared.contains_key(INPUT) {
            let mut seen = std::collections::HashSet::new();
            for n in &config.nodes {
                if n.name == INPUT || !seen.insert(n.name.as_str()) {
                    return Err(Error::config(&n.name, "duplicate or reserved node name"));
                }
            }
        }

        let mut nodes: Vec<Node> = Vec::new();
        // name -> value id, including block aliases
        let mut values: HashMap<String, usize> = HashMap::new();
        values.insert(INPUT.to_string(), 0);
        let mut shapes = vec![FeatureShape { h, w, c }];

        for (pos, spec) in config.nodes.iter().enumerate() {
            let mut input_ids = Vec::with_capacity(spec.inputs.len());
            for inp in &spec.inputs {
                match values.get(inp.as_str()) {
                    Some(&id) => input_ids.push(id),
                    None => {
                        let reason = match declared.get(inp.as_str()) {
                            Some(&later) if later >= pos => {
                                format!("input `{inp}` is declared later (cycle or forward reference)")
                            }
                            _ => format!("dangling input `{inp}`: no such node"),
                        };
                        return Err(Error::config(&spec.name, reason));
                    }
                }
            }
            let primitives = match spec.op {
                OpKind::Prpe | OpKind::PrpeS => {
                    let c_in = input_ids
                        .first()
                        .map(|&id| shapes[id].c)
                        .ok_or_else(|| Error::config(&spec.name, "block needs an input"))?;
                    prpe::expand_prpe_block(spec, c_in)?
                        .into_iter()
                        .map(|p| (p, Some(spec.name.clone())))
                        .collect()
                }
                _ => vec![(spec.clone(), None)],
            };
            for (prim, block) in primitives {
                let ids: Vec<usize> = prim
                    .inputs
                    .iter()
                    .map(|n| values[n.as_str()])
                    .collect();
                let in_shapes: Vec<FeatureShape> = ids.iter().map(|&i| shapes[i]).collect();
                let (layer, out) = infer_layer(&prim, &in_shapes)?;
                nodes.push(Node {
                    name: prim.name.clone(),
                    layer,
                    inputs: ids,
                    input_shapes: in_shapes,
                    output_shape: out,
                    block,
                });
                shapes.push(out);
                values.insert(prim.name, nodes.len());
            }
            if matches!(spec.op, OpKind::Prpe | OpKind::PrpeS) {
                values.insert(spec.name.clone(), nodes.len());
            }
        }

        let heads: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.layer == Layer::SoftmaxHead)
            .map(|(i, _)| i)
            .collect();
        if heads.len() != 1 {
            return Err(Error::config(
                &config.output,
                format!("graph must have exactly one softmax_head, found {}", heads.len()),
            ));
        }
        let output = match values.get(config.output.as_str()) {
            Some(&id) if id > 0 => id - 1,
            _ => {
                return Err(Error::config(
                    &config.output,
                    "output does not name a declared node",
                ))
            }
        };
        if output != heads[0] {
            return Err(Error::config(&config.output, "output must be the softmax_head node"));
        }
        Ok(ArchitectureGraph {
            config,
            nodes,
            output,
        })
    }

    /// Re-runs shape inference with a different input height and width.
    pub fn with_input_resolution(&self, h: usize, w: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.input_shape[0] = h;
        config.input_shape[1] = w;
        Self::from_config(config)
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn input_shape(&self) -> FeatureShape {
        let [h, w, c] = self.config.input_shape;
        FeatureShape { h, w, c }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Index of the softmax head.
    pub fn output_index(&self) -> usize {
        self.output
    }

    /// Number of classes predicted by the head.
    pub fn num_classes(&self) -> usize {
        self.nodes[self.output].output_shape.c
    }

    /// Names of the PRPE / PRPE-S blocks, in order.
    pub fn blocks(&self) -> Vec<(String, OpKind)> {
        self.config
            .nodes
            .iter()
            .filter(|n| matches!(n.op, OpKind::Prpe | OpKind::PrpeS))
            .map(|n| (n.name.clone(), n.op))
            .collect()
    }
}

fn single(spec: &NodeSpec, shapes: &[FeatureShape]) -> Result<FeatureShape> {
    match shapes {
        [s] => Ok(*s),
        _ => Err(Error::config(
            &spec.name,
            format!("{} takes exactly one input, got {}", spec.op, shapes.len()),
        )),
    }
}

fn infer_layer(spec: &NodeSpec, shapes: &[FeatureShape]) -> Result<(Layer, FeatureShape)> {
    let name = spec.name.as_str();
    let a = &spec.attrs;
    let pair = |v: [usize; 2]| (v[0], v[1]);
    match spec.op {
        OpKind::Conv => {
            let s = single(spec, shapes)?;
            let depthwise = a.depthwise.unwrap_or(false);
            let groups = if depthwise { s.c } else { a.groups.unwrap_or(1) };
            let out_channels = match (a.out_channels, depthwise) {
                (Some(o), _) => o,
                (None, true) => s.c,
                (None, false) => a.require(name, "out_channels", None)?,
            };
            let params = ConvParams {
                kernel: pair(a.kernel.ok_or_else(|| {
                    Error::config(name, "missing attribute `kernel`")
                })?),
                stride: pair(a.stride.unwrap_or([1, 1])),
                groups,
                in_channels: s.c,
                out_channels,
                padding: a.padding.unwrap_or_default(),
                has_bias: a.bias.unwrap_or(true),
            };
            params
                .validate()
                .map_err(|e| Error::config(name, e.to_string()))?;
            let (h, w) = params
                .output_hw(s.h, s.w)
                .map_err(|e| Error::config(name, e.to_string()))?;
            Ok((Layer::Conv(params), FeatureShape { h, w, c: out_channels }))
        }
        OpKind::Batchnorm => {
            let s = single(spec, shapes)?;
            let epsilon = a.epsilon.unwrap_or(1e-5);
            let momentum = a.momentum.unwrap_or(0.9);
            if epsilon < 0.0 || !(0.0..1.0).contains(&momentum) || momentum == 0.0 {
                return Err(Error::config(name, "epsilon must be >= 0 and momentum in (0,1)"));
            }
            Ok((
                Layer::BatchNorm {
                    channels: s.c,
                    epsilon,
                    momentum,
                },
                s,
            ))
        }
        OpKind::Relu => Ok((Layer::Relu, single(spec, shapes)?)),
        OpKind::Dense => {
            let s = single(spec, shapes)?;
            let units = a.require(name, "units", a.units)?;
            Ok((
                Layer::Dense {
                    in_features: s.numel(),
                    units,
                    bias: a.bias.unwrap_or(true),
                },
                FeatureShape { h: 1, w: 1, c: units },
            ))
        }
        OpKind::GlobalAvgPool => {
            let s = single(spec, shapes)?;
            Ok((Layer::GlobalAvgPool, FeatureShape { h: 1, w: 1, c: s.c }))
        }
        OpKind::MaxPool => {
            let s = single(spec, shapes)?;
            let kernel = pair(a.kernel.ok_or_else(|| Error::config(name, "missing attribute `kernel`"))?);
            let stride = a.stride.map(pair).unwrap_or(kernel);
            let padding = a.padding.unwrap_or_default();
            let probe = ConvParams {
                kernel,
                stride,
                groups: 1,
                in_channels: 1,
                out_channels: 1,
                padding,
                has_bias: false,
            };
            probe
                .validate()
                .map_err(|e| Error::config(name, e.to_string()))?;
            let (h, w) = probe
                .output_hw(s.h, s.w)
                .map_err(|e| Error::config(name, e.to_string()))?;
            Ok((
                Layer::MaxPool {
                    kernel,
                    stride,
                    padding,
                },
                FeatureShape { h, w, c: s.c },
            ))
        }
        OpKind::Add => {
            let first = *shapes
                .first()
                .ok_or_else(|| Error::config(name, "add needs at least one input"))?;
            if let Some(bad) = shapes.iter().find(|s| **s != first) {
                return Err(Error::config(
                    name,
                    format!("add inputs must be shape-identical: {first} vs {bad}"),
                ));
            }
            Ok((Layer::Add, first))
        }
        OpKind::Concat => {
            let first = *shapes
                .first()
                .ok_or_else(|| Error::config(name, "concat needs at least one input"))?;
            if shapes.iter().any(|s| (s.h, s.w) != (first.h, first.w)) {
                return Err(Error::config(name, "concat inputs must share spatial extent"));
            }
            let c = shapes.iter().map(|s| s.c).sum();
            Ok((Layer::Concat, FeatureShape { c, ..first }))
        }
        OpKind::Replicate => {
            let s = single(spec, shapes)?;
            let r = a.require(name, "r", a.r)?;
            if r == 0 {
                return Err(Error::config(name, "replication factor must be >= 1"));
            }
            Ok((Layer::Replicate { r }, FeatureShape { c: s.c * r, ..s }))
        }
        OpKind::SoftmaxHead => {
            let s = single(spec, shapes)?;
            Ok((Layer::SoftmaxHead, FeatureShape { h: 1, w: 1, c: s.numel() }))
        }
        OpKind::Prpe | OpKind::PrpeS => Err(Error::Internal(format!(
            "block `{name}` reached primitive inference unexpanded"
        ))),
    }
}
