use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ArchitectureGraph, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Expected parameter slot of a graph node.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub node: String,
    pub param: &'static str,
    pub shape: Shape,
    /// Logical rank; the trailing `rank` axes of `shape` are stored.
    pub rank: u8,
    pub trainable: bool,
}

impl ParamSlot {
    pub fn key(&self) -> String {
        param_key(&self.node, self.param)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.shape.dims()[4 - self.rank as usize..].to_vec()
    }
}

pub fn param_key(node: &str, param: &str) -> String {
    format!("{node}:{param}")
}

/// Splits a parameter key into node name and parameter name.
pub fn split_key(key: &str) -> (&str, &str) {
    key.rsplit_once(':').unwrap_or((key, ""))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub rank: u8,
    pub trainable: bool,
}

/// All weights and batch-norm state of a graph, keyed `node:param`, in
/// topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl ArchitectureGraph {
    /// Parameter layout in topological order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for node in self.nodes() {
            let mut push = |param: &'static str, shape: Shape, rank: u8, trainable: bool| {
                slots.push(ParamSlot {
                    node: node.name.clone(),
                    param,
                    shape,
                    rank,
                    trainable,
                })
            };
            match &node.layer {
                Layer::Conv(p) => {
                    push("kernel", p.weight_shape(), 4, true);
                    if p.has_bias {
                        push("bias", Shape::new(1, 1, 1, p.out_channels), 1, true);
                    }
                }
                Layer::BatchNorm { channels, .. } => {
                    let v = Shape::new(1, 1, 1, *channels);
                    push("gamma", v, 1, true);
                    push("beta", v, 1, true);
                    push("running_mean", v, 1, false);
                    push("running_var", v, 1, false);
                }
                Layer::Dense {
                    in_features,
                    units,
                    bias,
                } => {
                    push("kernel", Shape::new(1, 1, *in_features, *units), 2, true);
                    if *bias {
                        push("bias", Shape::new(1, 1, 1, *units), 1, true);
                    }
                }
                _ => {}
            }
        }
        slots
    }

    /// Number of trainable scalars the graph instantiates.
    pub fn trainable_param_count(&self) -> usize {
        self.param_slots()
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.shape.numel())
            .sum()
    }
}

impl<T: Element> ParamStore<T> {
    /// He-style fan-in initialization for kernels, zeros for biases,
    /// identity for batch norm.
    pub fn init(graph: &ArchitectureGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = IndexMap::new();
        for slot in graph.param_slots() {
            let n = slot.shape.numel();
            let data: Vec<T> = match slot.param {
                "kernel" => {
                    let fan_in = match slot.rank {
                        4 => slot.shape.n * slot.shape.h * slot.shape.w,
                        _ => slot.shape.w,
                    };
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                }
                "gamma" | "running_var" => vec![T::ONE; n],
                _ => vec![T::ZERO; n],
            };
            entries.insert(
                slot.key(),
                Param {
                    value: Tensor::from_vec(slot.shape, data).expect("slot shape"),
                    rank: slot.rank,
                    trainable: slot.trainable,
                },
            );
        }
        ParamStore { entries }
    }

    pub fn from_entries(entries: IndexMap<String, Param<T>>) -> Self {
        ParamStore { entries }
    }

    /// Checks every slot of `graph` is present with the right shape and
    /// nothing else is stored.
    pub fn check_compatible(&self, graph: &ArchitectureGraph) -> Result<()> {
        let slots = graph.param_slots();
        for slot in &slots {
            match self.entries.get(&slot.key()) {
                None => return Err(Error::MissingWeights(slot.node.clone())),
                Some(p) if p.value.shape() != slot.shape => {
                    return Err(Error::Compatibility(format!(
                        "`{}` has shape {}, graph expects {}",
                        slot.key(),
                        p.value.shape(),
                        slot.shape
                    )))
                }
                _ => {}
            }
        }
        if self.entries.len() != slots.len() {
            let known: std::collections::HashSet<String> = slots.iter().map(|s| s.key()).collect();
            let extra: Vec<&str> = self
                .entries
                .keys()
                .filter(|k| !known.contains(*k))
                .map(|k| k.as_str())
                .collect();
            return Err(Error::Compatibility(format!(
                "tensors not in graph: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }

    pub fn get(&self, node: &str, param: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(&param_key(node, param))
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingWeights(node.to_string()))
    }

    pub fn get_mut(&mut self, node: &str, param: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(&param_key(node, param))
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingWeights(node.to_string()))
    }

    pub fn entries(&self) -> &IndexMap<String, Param<T>> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn remove_node(&mut self, node: &str) {
        self.entries.retain(|k, _| split_key(k).0 != node);
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            rank: p.rank,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
