use indexmap::IndexMap;

use super::{ArchitectureGraph, Layer, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{
    self, BatchNormCache, BatchNormParams, Element, MaxPoolIndices, Mode, Shape, Tensor,
};

enum Aux<T> {
    None,
    BatchNorm(BatchNormCache<T>),
    MaxPool(MaxPoolIndices),
}

/// Result of a forward pass together with the activations needed by
/// [`ArchitectureGraph::backward`].
pub struct ForwardPass<T> {
    /// Input of the softmax head, shaped `(N, 1, 1, K)`.
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub mode: Mode,
    values: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Element> ForwardPass<T> {
    /// Activation of a value id (0 = network input).
    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn batch_size(&self) -> usize {
        self.values[0].shape().n
    }
}

/// Gradients of trainable parameters, keyed like [`ParamStore`], plus the
/// gradient with respect to the network input.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: IndexMap<String, Tensor<T>>,
    pub input: Tensor<T>,
}

fn batched(shape: super::FeatureShape, n: usize) -> Shape {
    Shape::new(n, shape.h, shape.w, shape.c)
}

fn bn_params<T: Element>(
    params: &ParamStore<T>,
    node: &str,
    channels: usize,
    epsilon: f64,
    momentum: f64,
) -> Result<BatchNormParams<T>> {
    Ok(BatchNormParams {
        channels,
        epsilon,
        momentum,
        gamma: params.get(node, "gamma")?.data().to_vec(),
        beta: params.get(node, "beta")?.data().to_vec(),
        running_mean: params.get(node, "running_mean")?.data().to_vec(),
        running_var: params.get(node, "running_var")?.data().to_vec(),
    })
}

impl ArchitectureGraph {
    fn check_input<T: Element>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let e = self.input_shape();
        for (dim, exp, got) in [("height", e.h, s.h), ("width", e.w, s.w), ("channels", e.c, s.c)] {
            if exp != got {
                return Err(Error::Shape {
                    op: "graph_forward",
                    dim,
                    expected: exp,
                    actual: got,
                });
            }
        }
        if s.n == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        Ok(())
    }

    fn run_node<T: Element>(
        &self,
        idx: usize,
        params: &ParamStore<T>,
        inputs: &[&Tensor<T>],
        mode: Mode,
    ) -> Result<(Tensor<T>, Aux<T>)> {
        let node = &self.nodes()[idx];
        let name = node.name.as_str();
        let x = inputs[0];
        Ok(match &node.layer {
            Layer::Conv(p) => {
                let w = params.get(name, "kernel")?;
                let b = if p.has_bias {
                    Some(params.get(name, "bias")?.data())
                } else {
                    None
                };
                (tensor::conv2d(x, p, w, b)?, Aux::None)
            }
            Layer::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => {
                let bn = bn_params(params, name, *channels, *epsilon, *momentum)?;
                let (y, cache) = tensor::batchnorm_forward(x, &bn, mode)?;
                (y, Aux::BatchNorm(cache))
            }
            Layer::Relu => (tensor::relu(x), Aux::None),
            Layer::Dense { bias, .. } => {
                let w = params.get(name, "kernel")?;
                let zeros;
                let b = if *bias {
                    params.get(name, "bias")?.data()
                } else {
                    zeros = vec![T::ZERO; w.shape().c];
                    &zeros
                };
                (tensor::dense(x, w, b)?, Aux::None)
            }
            Layer::GlobalAvgPool => (tensor::global_avg_pool(x)?, Aux::None),
            Layer::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let (y, idx) = tensor::max_pool(x, *kernel, *stride, *padding)?;
                (y, Aux::MaxPool(idx))
            }
            Layer::Add => (tensor::add(inputs)?, Aux::None),
            Layer::Concat => (tensor::concat_channels(inputs)?, Aux::None),
            Layer::Replicate { r } => (tensor::replicate_channels(x, *r)?, Aux::None),
            Layer::SoftmaxHead => {
                let s = x.shape();
                (x.clone().reshape([s.n, 1, 1, s.item_len()])?, Aux::None)
            }
        })
    }

    /// Forward pass keeping every activation for a later backward pass.
    ///
    /// Train mode normalizes with batch statistics; the running statistics
    /// are not touched until [`ParamStore::commit_running_stats`].
    pub fn forward<T: Element>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        self.check_input(x)?;
        let has_bn = self
            .nodes()
            .iter()
            .any(|n| matches!(n.layer, Layer::BatchNorm { .. }));
        if mode == Mode::Train && has_bn && x.shape().n < 2 {
            return Err(Error::Precondition(
                "train-mode batch norm needs a batch of at least 2".into(),
            ));
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes().len() + 1);
        let mut aux = Vec::with_capacity(self.nodes().len());
        values.push(x.clone());
        for (i, node) in self.nodes().iter().enumerate() {
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&id| &values[id]).collect();
            let (y, a) = self.run_node(i, params, &inputs, mode)?;
            values.push(y);
            aux.push(a);
        }
        let logits = values[self.output_index() + 1].clone();
        let probs = tensor::softmax(&logits);
        Ok(ForwardPass {
            logits,
            probs,
            mode,
            values,
            aux,
        })
    }

    /// Inference-mode class probabilities, `(N, K)` flattened row-major.
    /// Activations are dropped as soon as their last consumer has run.
    pub fn predict<T: Element>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let n_nodes = self.nodes().len();
        let mut last_use = vec![0usize; n_nodes + 1];
        for (i, node) in self.nodes().iter().enumerate() {
            for &id in &node.inputs {
                last_use[id] = i;
            }
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n_nodes + 1];
        values[0] = Some(x.clone());
        for (i, node) in self.nodes().iter().enumerate() {
            let inputs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&id| values[id].as_ref().expect("value alive until last use"))
                .collect();
            let (y, _) = self.run_node(i, params, &inputs, Mode::Infer)?;
            if i == self.output_index() {
                return Ok(tensor::softmax(&y));
            }
            values[i + 1] = Some(y);
            for &id in &node.inputs {
                if last_use[id] == i {
                    values[id] = None;
                }
            }
        }
        Err(Error::Internal("graph has no reachable head".into()))
    }

    /// Gradients of the mean cross-entropy against `labels`.
    pub fn backward<T: Element>(
        &self,
        params: &ParamStore<T>,
        pass: &ForwardPass<T>,
        labels: &[usize],
    ) -> Result<Gradients<T>> {
        let dlogits = tensor::softmax_xent_backward(&pass.probs, labels)?;
        self.backward_from_logits(params, pass, &dlogits)
    }

    /// Backpropagates an arbitrary upstream gradient on the logits.
    pub fn backward_from_logits<T: Element>(
        &self,
        params: &ParamStore<T>,
        pass: &ForwardPass<T>,
        dlogits: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        let n_nodes = self.nodes().len();
        if pass.values.len() != n_nodes + 1 || pass.aux.len() != n_nodes {
            return Err(Error::Internal(
                "forward cache does not belong to this graph".into(),
            ));
        }
        if dlogits.shape() != pass.logits.shape() {
            return Err(Error::Internal("logit gradient shape mismatch".into()));
        }
        let n = pass.batch_size();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n_nodes + 1];
        let mut pgrads: IndexMap<String, Tensor<T>> = IndexMap::new();
        for slot in self.param_slots() {
            if slot.trainable {
                pgrads.insert(slot.key(), Tensor::zeros(slot.shape));
            }
        }
        let head = self.output_index();
        grads[head + 1] = Some(dlogits.clone());

        let accumulate = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, g: Tensor<T>| -> Result<()> {
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        for i in (0..n_nodes).rev() {
            let Some(gy) = grads[i + 1].take() else {
                continue;
            };
            let node = &self.nodes()[i];
            let name = node.name.as_str();
            let x = &pass.values[node.inputs[0]];
            match &node.layer {
                Layer::Conv(p) => {
                    let w = params.get(name, "kernel")?;
                    let g = tensor::conv2d_backward(x, p, w, &gy)?;
                    pgrads.insert(super::params::param_key(name, "kernel"), g.weights);
                    if let Some(b) = g.bias {
                        pgrads.insert(super::params::param_key(name, "bias"), Tensor::vector(b));
                    }
                    accumulate(&mut grads, node.inputs[0], g.input)?;
                }
                Layer::BatchNorm { .. } => {
                    let Aux::BatchNorm(cache) = &pass.aux[i] else {
                        return Err(Error::Internal(format!("no batch-norm cache for `{name}`")));
                    };
                    let gamma = params.get(name, "gamma")?;
                    let g = tensor::batchnorm_backward(gamma.data(), cache, &gy)?;
                    pgrads.insert(super::params::param_key(name, "gamma"), Tensor::vector(g.gamma));
                    pgrads.insert(super::params::param_key(name, "beta"), Tensor::vector(g.beta));
                    accumulate(&mut grads, node.inputs[0], g.input)?;
                }
                Layer::Relu => {
                    let g = tensor::relu_backward(x, &gy)?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Layer::Dense { bias, .. } => {
                    let w = params.get(name, "kernel")?;
                    let g = tensor::dense_backward(x, w, &gy)?;
                    pgrads.insert(super::params::param_key(name, "kernel"), g.weights);
                    if *bias {
                        pgrads.insert(super::params::param_key(name, "bias"), Tensor::vector(g.bias));
                    }
                    accumulate(&mut grads, node.inputs[0], g.input)?;
                }
                Layer::GlobalAvgPool => {
                    let g = tensor::global_avg_pool_backward(x.shape(), &gy)?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Layer::MaxPool { .. } => {
                    let Aux::MaxPool(idx) = &pass.aux[i] else {
                        return Err(Error::Internal(format!("no max-pool cache for `{name}`")));
                    };
                    let g = tensor::max_pool_backward(x.shape(), idx, &gy)?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Layer::Add => {
                    for &id in &node.inputs {
                        accumulate(&mut grads, id, gy.clone())?;
                    }
                }
                Layer::Concat => {
                    let channels: Vec<usize> = node.input_shapes.iter().map(|s| s.c).collect();
                    let parts = tensor::concat_channels_backward(&gy, &channels)?;
                    for (&id, g) in node.inputs.iter().zip(parts) {
                        accumulate(&mut grads, id, g)?;
                    }
                }
                Layer::Replicate { r } => {
                    let g = tensor::replicate_channels_backward(&gy, *r)?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Layer::SoftmaxHead => {
                    let g = gy.reshape(batched(node.input_shapes[0], n))?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
            }
        }
        let input = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(pass.values[0].shape()));
        Ok(Gradients {
            params: pgrads,
            input,
        })
    }
}

impl<T: Element> ParamStore<T> {
    /// Folds the batch statistics of a train-mode pass into every batch-norm
    /// node's running statistics.
    pub fn commit_running_stats(
        &mut self,
        graph: &ArchitectureGraph,
        pass: &ForwardPass<T>,
    ) -> Result<()> {
        if pass.mode != Mode::Train {
            return Ok(());
        }
        for (i, node) in graph.nodes().iter().enumerate() {
            let Layer::BatchNorm {
                channels,
                epsilon,
                momentum,
            } = node.layer
            else {
                continue;
            };
            let Aux::BatchNorm(cache) = &pass.aux[i] else {
                return Err(Error::Internal(format!("no batch-norm cache for `{}`", node.name)));
            };
            let mut bn = bn_params(self, &node.name, channels, epsilon, momentum)?;
            let s = pass.values[node.inputs[0]].shape();
            bn.update_running(cache, s.n * s.h * s.w);
            self.get_mut(&node.name, "running_mean")?
                .data_mut()
                .copy_from_slice(&bn.running_mean);
            self.get_mut(&node.name, "running_var")?
                .data_mut()
                .copy_from_slice(&bn.running_var);
        }
        Ok(())
    }
}
