//! Pre-activation ResNet-50 baseline.
//!
//! Layout follows the common V2 definition: a 7x7/2 stem conv with bias, a
//! 3x3/2 max pool, four stages of 3-4-6-3 bottlenecks (BN-ReLU before each
//! conv, biased 1x1 output and projection convs, bias-free inner convs), a
//! final BN-ReLU, global average pooling and a dense head.

use super::spec::{ArchitectureConfig, Attrs, NodeSpec, OpKind, INPUT};
use super::ArchitectureGraph;
use crate::error::Result;

/// Bottleneck counts per stage.
pub const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;
pub const INPUT_RESOLUTION: usize = 512;

struct Builder {
    nodes: Vec<NodeSpec>,
}

impl Builder {
    fn push(&mut self, name: String, op: OpKind, attrs: Attrs, inputs: &[&str]) -> String {
        self.nodes.push(NodeSpec {
            name: name.clone(),
            op,
            attrs,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        name
    }

    fn conv(&mut self, name: String, input: &str, k: usize, s: usize, out: usize, bias: bool) -> String {
        let attrs = Attrs {
            kernel: Some([k, k]),
            stride: (s != 1).then_some([s, s]),
            out_channels: Some(out),
            bias: Some(bias),
            ..Attrs::default()
        };
        self.push(name, OpKind::Conv, attrs, &[input])
    }

    fn bn_relu(&mut self, prefix: &str, input: &str) -> String {
        let bn = self.push(format!("{prefix}_bn"), OpKind::Batchnorm, Attrs::default(), &[input]);
        self.push(format!("{prefix}_relu"), OpKind::Relu, Attrs::default(), &[&bn])
    }

    fn bottleneck(&mut self, name: &str, input: &str, width: usize, stride: usize, project: bool) -> String {
        let pre = self.bn_relu(&format!("{name}/preact"), input);
        let shortcut = if project {
            self.conv(format!("{name}/shortcut"), &pre, 1, stride, width * EXPANSION, true)
        } else {
            input.to_string()
        };
        let c1 = self.conv(format!("{name}/conv1"), &pre, 1, 1, width, false);
        let a1 = self.bn_relu(&format!("{name}/conv1"), &c1);
        let c2 = self.conv(format!("{name}/conv2"), &a1, 3, stride, width, false);
        let a2 = self.bn_relu(&format!("{name}/conv2"), &c2);
        let c3 = self.conv(format!("{name}/conv3"), &a2, 1, 1, width * EXPANSION, true);
        self.push(format!("{name}/add"), OpKind::Add, Attrs::default(), &[&shortcut, &c3])
    }
}

/// Config of the baseline at the calibrated 512x512x3 input.
pub fn resnet50_config(num_classes: usize) -> ArchitectureConfig {
    let mut b = Builder { nodes: Vec::new() };
    let stem = b.conv("conv1".into(), INPUT, 7, 2, 64, true);
    let mut x = b.push(
        "pool1".into(),
        OpKind::MaxPool,
        Attrs {
            kernel: Some([3, 3]),
            stride: Some([2, 2]),
            ..Attrs::default()
        },
        &[&stem],
    );
    for (stage, (&blocks, &width)) in STAGE_BLOCKS.iter().zip(&STAGE_WIDTHS).enumerate() {
        for i in 0..blocks {
            let stride = if i == 0 && stage > 0 { 2 } else { 1 };
            let name = format!("stage{}_block{}", stage + 1, i + 1);
            x = b.bottleneck(&name, &x, width, stride, i == 0);
        }
    }
    let post = b.bn_relu("post", &x);
    let pool = b.push("avg_pool".into(), OpKind::GlobalAvgPool, Attrs::default(), &[&post]);
    let logits = b.push(
        "logits".into(),
        OpKind::Dense,
        Attrs {
            units: Some(num_classes),
            ..Attrs::default()
        },
        &[&pool],
    );
    let head = b.push("softmax".into(), OpKind::SoftmaxHead, Attrs::default(), &[&logits]);
    ArchitectureConfig {
        input_shape: [INPUT_RESOLUTION, INPUT_RESOLUTION, 3],
        nodes: b.nodes,
        output: head,
    }
}

pub fn build_resnet50(num_classes: usize) -> Result<ArchitectureGraph> {
    ArchitectureGraph::from_config(resnet50_config(num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bottlenecks_and_three_way_head() {
        let g = build_resnet50(3).unwrap();
        let adds = g.nodes().iter().filter(|n| n.name.ends_with("/add")).count();
        assert_eq!(adds, STAGE_BLOCKS.iter().sum::<usize>());
        assert_eq!(adds, 16);
        assert_eq!(g.num_classes(), 3);
        let last = g.node("post_relu").unwrap().output_shape;
        assert_eq!((last.h, last.w, last.c), (16, 16, 2048));
    }

    #[test]
    fn bundled_file_matches_builder() {
        let bundled = ArchitectureConfig::from_json(super::super::bundled_config("resnet50").unwrap()).unwrap();
        assert_eq!(bundled, resnet50_config(3));
    }
}
