//! Projection-replication-projection-expansion blocks.
//!
//! A PRPE block expands into five primitives, in order:
//!
//! 1. pointwise projection `c_in -> c_proj`
//! 2. channel replication `x r` (no parameters)
//! 3. depthwise 3x3 over `r * c_proj` channels (stride 2 for PRPE-S)
//! 4. pointwise projection `r * c_proj -> c_proj`
//! 5. pointwise expansion `c_proj -> c_out`

use super::spec::{Attrs, NodeSpec, OpKind};
use crate::error::{Error, Result};

/// Kernel size of the depthwise stage.
pub const DEPTHWISE_KERNEL: usize = 3;

/// Suffixes of the primitive nodes a block expands into, in order.
pub const STAGES: [&str; 5] = ["project", "replicate", "depthwise", "compress", "expand"];

/// Name of the primitive that produces a block's output.
pub fn block_output(block: &str) -> String {
    format!("{block}/{}", STAGES[4])
}

pub fn expand_prpe_block(spec: &NodeSpec, c_in: usize) -> Result<Vec<NodeSpec>> {
    let stride = match spec.op {
        OpKind::Prpe => 1,
        OpKind::PrpeS => 2,
        other => {
            return Err(Error::config(
                &spec.name,
                format!("expected prpe or prpe_s, got {other}"),
            ))
        }
    };
    let name = &spec.name;
    let a = &spec.attrs;
    let c_proj = a.require(name, "c_proj", a.c_proj)?;
    let r = a.require(name, "r", a.r)?;
    let c_out = a.require(name, "c_out", a.c_out)?;
    if spec.inputs.len() != 1 {
        return Err(Error::config(
            name,
            format!("block takes exactly one input, got {}", spec.inputs.len()),
        ));
    }
    if c_proj == 0 || r == 0 || c_out == 0 {
        return Err(Error::config(name, "c_proj, r and c_out must be positive"));
    }
    if c_proj >= c_in {
        return Err(Error::config(
            name,
            format!("projection must lower channel dimensionality: c_proj {c_proj} >= c_in {c_in}"),
        ));
    }
    let bias = a.bias.unwrap_or(true);
    let pointwise = |out: usize| Attrs {
        kernel: Some([1, 1]),
        out_channels: Some(out),
        bias: Some(bias),
        ..Attrs::default()
    };
    let stage = |i: usize| format!("{name}/{}", STAGES[i]);

    Ok(vec![
        NodeSpec {
            name: stage(0),
            op: OpKind::Conv,
            attrs: pointwise(c_proj),
            inputs: spec.inputs.clone(),
        },
        NodeSpec {
            name: stage(1),
            op: OpKind::Replicate,
            attrs: Attrs {
                r: Some(r),
                ..Attrs::default()
            },
            inputs: vec![stage(0)],
        },
        NodeSpec {
            name: stage(2),
            op: OpKind::Conv,
            attrs: Attrs {
                kernel: Some([DEPTHWISE_KERNEL; 2]),
                stride: Some([stride; 2]),
                depthwise: Some(true),
                bias: Some(bias),
                ..Attrs::default()
            },
            inputs: vec![stage(1)],
        },
        NodeSpec {
            name: stage(3),
            op: OpKind::Conv,
            attrs: pointwise(c_proj),
            inputs: vec![stage(2)],
        },
        NodeSpec {
            name: stage(4),
            op: OpKind::Conv,
            attrs: pointwise(c_out),
            inputs: vec![stage(3)],
        },
    ])
}
