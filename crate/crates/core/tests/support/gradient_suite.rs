//! Finite-difference checks of every differentiable primitive, the PRPE
//! composites and randomly wired graphs. Shared by the `gradients` tests and
//! the acceptance runner; each case panics with the offending seed.

use covidnet_core::graph::{ArchitectureGraph, Layer, ParamStore, INPUT};
use covidnet_core::tensor::gradcheck::{grad_check, GradCheckReport, Variable};
use covidnet_core::tensor::{self, ConvParams, Mode, Padding, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn t(shape: impl Into<Shape>, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

/// `sum(y * r)`: a linear probe whose upstream gradient is `r`.
fn probe(y: &Tensor<f64>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn assert_passed(what: &str, seed: u64, report: &GradCheckReport) {
    assert!(report.passed(), "{what} seed {seed}: {report}");
}

fn conv_case(seed: u64, shape: [usize; 4], params: ConvParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws = params.weight_shape();
    let x = uniform(&mut rng, Shape::from(shape).numel());
    let w = uniform(&mut rng, ws.numel());
    let b = uniform(&mut rng, params.out_channels);
    let (oh, ow) = params.output_hw(shape[1], shape[2]).unwrap();
    let r = uniform(&mut rng, shape[0] * oh * ow * params.out_channels);
    let mut point = vec![Variable::new("x", x), Variable::new("w", w)];
    if params.has_bias {
        point.push(Variable::new("b", b));
    }
    let report = grad_check(
        &point,
        |v| {
            let x = t(shape, &v[0]);
            let w = t(ws, &v[1]);
            let bias = params.has_bias.then(|| v[2].as_slice());
            let y = tensor::conv2d(&x, &params, &w, bias)?;
            let g = tensor::conv2d_backward(&x, &params, &w, &Tensor::from_vec(y.shape(), r.clone())?)?;
            let mut grads = vec![g.input.into_data(), g.weights.into_data()];
            if let Some(gb) = g.bias {
                grads.push(gb);
            }
            Ok((probe(&y, &r), grads))
        },
        STEP,
        TOL,
    )
    .unwrap();
    assert_passed("conv2d", seed, &report);
}

pub fn conv2d_variants() {
    for seed in 0..SEEDS {
        conv_case(seed, [1, 6, 6, 3], ConvParams {
            kernel: (3, 3),
            stride: (1, 1),
            groups: 1,
            in_channels: 3,
            out_channels: 4,
            padding: Padding::Same,
            has_bias: true,
        });
        conv_case(seed, [2, 7, 5, 4], ConvParams {
            kernel: (3, 2),
            stride: (2, 1),
            groups: 2,
            in_channels: 4,
            out_channels: 6,
            padding: Padding::Same,
            has_bias: false,
        });
        conv_case(seed, [1, 6, 6, 2], ConvParams {
            kernel: (3, 3),
            stride: (2, 2),
            groups: 1,
            in_channels: 2,
            out_channels: 3,
            padding: Padding::Valid,
            has_bias: true,
        });
        conv_case(seed, [2, 5, 5, 4], ConvParams::depthwise(4, 3, 2, true));
        conv_case(seed, [2, 4, 4, 5], ConvParams::pointwise(5, 3, true));
    }
}

pub fn batchnorm_train_and_infer() {
    for seed in 0..SEEDS {
        for mode in [Mode::Train, Mode::Infer] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [2, 3, 3, 3];
            let n = 54;
            let x = uniform(&mut rng, n);
            let gamma: Vec<f64> = uniform(&mut rng, 3).iter().map(|g| 1.0 + 0.5 * g).collect();
            let beta = uniform(&mut rng, 3);
            let mut bn = tensor::BatchNormParams::<f64>::new(3);
            bn.running_mean = uniform(&mut rng, 3);
            bn.running_var = uniform(&mut rng, 3).iter().map(|v| 1.0 + 0.5 * v).collect();
            let r = uniform(&mut rng, n);
            let point = [
                Variable::new("x", x),
                Variable::new("gamma", gamma),
                Variable::new("beta", beta),
            ];
            let report = grad_check(
                &point,
                |v| {
                    let mut p = bn.clone();
                    p.gamma = v[1].clone();
                    p.beta = v[2].clone();
                    let (y, cache) = tensor::batchnorm_forward(&t(shape, &v[0]), &p, mode)?;
                    let g = tensor::batchnorm_backward(&p.gamma, &cache, &t(shape, &r))?;
                    Ok((probe(&y, &r), vec![g.input.into_data(), g.gamma, g.beta]))
                },
                STEP,
                TOL,
            )
            .unwrap();
            assert_passed(&format!("batchnorm {mode:?}"), seed, &report);
        }
    }
}

/// Runs a single-input, parameter-free op through the checker.
fn unary_case(
    what: &str,
    seed: u64,
    shape: [usize; 4],
    x: Vec<f64>,
    fwd: impl Fn(&Tensor<f64>) -> covidnet_core::Result<Tensor<f64>>,
    bwd: impl Fn(&Tensor<f64>, &Tensor<f64>) -> covidnet_core::Result<Tensor<f64>>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let out_len = fwd(&t(shape, &x)).unwrap().len();
    let r = uniform(&mut rng, out_len);
    let report = grad_check(
        &[Variable::new("x", x)],
        |v| {
            let x = t(shape, &v[0]);
            let y = fwd(&x)?;
            let dy = Tensor::from_vec(y.shape(), r.clone())?;
            Ok((probe(&y, &r), vec![bwd(&x, &dy)?.into_data()]))
        },
        STEP,
        TOL,
    )
    .unwrap();
    assert_passed(what, seed, &report);
}

pub fn relu_away_from_kink() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..48)
            .map(|_| {
                let m = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        unary_case("relu", seed, [2, 2, 3, 4], x, |x| Ok(tensor::relu(x)), tensor::relu_backward);
    }
}

pub fn global_avg_pool_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 3, 4, 3];
        unary_case(
            "global_avg_pool",
            seed,
            shape,
            uniform(&mut rng, 72),
            tensor::global_avg_pool,
            |x, dy| tensor::global_avg_pool_backward(x.shape(), dy),
        );
    }
}

pub fn max_pool_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // A shuffled grid of well-separated values: no ties inside any window.
        let mut x: Vec<f64> = (0..2 * 5 * 5 * 2).map(|i| i as f64 * 0.01).collect();
        for i in (1..x.len()).rev() {
            x.swap(i, rng.random_range(0..=i));
        }
        for (k, s, pad) in [(2, 2, Padding::Same), (3, 2, Padding::Same), (3, 1, Padding::Valid)] {
            unary_case(
                "max_pool",
                seed,
                [2, 5, 5, 2],
                x.clone(),
                move |x| Ok(tensor::max_pool(x, (k, k), (s, s), pad)?.0),
                move |x, dy| {
                    let (_, idx) = tensor::max_pool(x, (k, k), (s, s), pad)?;
                    tensor::max_pool_backward(x.shape(), &idx, dy)
                },
            );
        }
    }
}

pub fn replicate_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1 + (seed as usize % 4);
        unary_case(
            "replicate",
            seed,
            [2, 3, 3, 2],
            uniform(&mut rng, 36),
            move |x| tensor::replicate_channels(x, r),
            move |_, dy| tensor::replicate_channels_backward(dy, r),
        );
    }
}

pub fn dense_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, fin, fout) = (3, 12, 3);
        let point = [
            Variable::new("x", uniform(&mut rng, n * fin)),
            Variable::new("w", uniform(&mut rng, fin * fout)),
            Variable::new("b", uniform(&mut rng, fout)),
        ];
        let r = uniform(&mut rng, n * fout);
        let report = grad_check(
            &point,
            |v| {
                let x = t([n, 2, 2, 3], &v[0]);
                let w = t([1, 1, fin, fout], &v[1]);
                let y = tensor::dense(&x, &w, &v[2])?;
                let g = tensor::dense_backward(&x, &w, &t(y.shape(), &r))?;
                Ok((probe(&y, &r), vec![g.input.into_data(), g.weights.into_data(), g.bias]))
            },
            STEP,
            TOL,
        )
        .unwrap();
        assert_passed("dense", seed, &report);
    }
}

pub fn concat_and_add_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = [2usize, 1, 3];
        let point: Vec<Variable> = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| Variable::new(format!("x{i}"), uniform(&mut rng, 2 * 3 * 3 * c)))
            .collect();
        let r = uniform(&mut rng, 2 * 3 * 3 * 6);
        let report = grad_check(
            &point,
            |v| {
                let xs: Vec<Tensor<f64>> = v
                    .iter()
                    .zip(chans)
                    .map(|(d, c)| t([2, 3, 3, c], d))
                    .collect();
                let refs: Vec<&Tensor<f64>> = xs.iter().collect();
                let y = tensor::concat_channels(&refs)?;
                let parts = tensor::concat_channels_backward(&t(y.shape(), &r), &chans)?;
                Ok((probe(&y, &r), parts.into_iter().map(|p| p.into_data()).collect()))
            },
            STEP,
            TOL,
        )
        .unwrap();
        assert_passed("concat", seed, &report);

        let point: Vec<Variable> = (0..3)
            .map(|i| Variable::new(format!("x{i}"), uniform(&mut rng, 18)))
            .collect();
        let r = uniform(&mut rng, 18);
        let report = grad_check(
            &point,
            |v| {
                let xs: Vec<Tensor<f64>> = v.iter().map(|d| t([1, 3, 3, 2], d)).collect();
                let refs: Vec<&Tensor<f64>> = xs.iter().collect();
                let y = tensor::add(&refs)?;
                // the sum rule: every branch receives the upstream gradient
                Ok((probe(&y, &r), vec![r.clone(); 3]))
            },
            STEP,
            TOL,
        )
        .unwrap();
        assert_passed("add", seed, &report);
    }
}

pub fn softmax_xent_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let logits: Vec<f64> = uniform(&mut rng, n * 3).iter().map(|v| 3.0 * v).collect();
        let report = grad_check(
            &[Variable::new("logits", logits)],
            |v| {
                let (loss, probs) = tensor::softmax_xent(&t([n, 1, 1, 3], &v[0]), &labels)?;
                let g = tensor::softmax_xent_backward(&probs, &labels)?;
                Ok((loss, vec![g.into_data()]))
            },
            STEP,
            TOL,
        )
        .unwrap();
        assert_passed("softmax_xent", seed, &report);
    }
}

// ---- graph-level checks ----------------------------------------------------

/// Values within this distance of a ReLU kink or a max-pool tie make the
/// function non-differentiable at finite-difference resolution. Exact zeros
/// (outputs of an upstream ReLU) stay zero under perturbation and are fine.
const KINK_MARGIN: f64 = 1e-4;

fn near_kink(graph: &ArchitectureGraph, params: &ParamStore<f64>, x: &Tensor<f64>) -> bool {
    let pass = graph.forward(params, x, Mode::Train).unwrap();
    graph.nodes().iter().any(|node| {
        let input = pass.value(node.inputs[0]);
        match node.layer {
            Layer::Relu => input.data().iter().any(|&v| v != 0.0 && v.abs() < KINK_MARGIN),
            Layer::MaxPool { .. } => {
                let s = input.shape();
                (0..s.n).any(|n| {
                    (0..s.c).any(|c| {
                        let mut vals: Vec<f64> = (0..s.h)
                            .flat_map(|y| (0..s.w).map(move |x| (y, x)))
                            .map(|(y, xx)| input.at(n, y, xx, c))
                            .collect();
                        vals.sort_by(f64::total_cmp);
                        vals.windows(2).any(|w| w[1] != 0.0 && w[1] - w[0] < KINK_MARGIN)
                    })
                })
            }
            _ => false,
        }
    })
}

/// Checks the gradient of the mean cross-entropy with respect to every
/// trainable parameter and the input of `graph`.
fn graph_check(graph: &ArchitectureGraph, seed: u64, batch: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_shape = graph.input_shape();
    let shape = Shape::new(batch, in_shape.h, in_shape.w, in_shape.c);
    let labels: Vec<usize> = (0..batch).map(|i| (i + seed as usize) % 3).collect();
    let (params, x) = loop {
        let params = ParamStore::<f64>::init(graph, rng.random());
        let x = Tensor::from_vec(shape, uniform(&mut rng, shape.numel())).unwrap();
        if !near_kink(graph, &params, &x) {
            break (params, x);
        }
    };
    let keys: Vec<String> = params
        .entries()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| k.clone())
        .collect();
    let mut point = vec![Variable::new(INPUT, x.data().to_vec())];
    for k in &keys {
        point.push(Variable::new(k.clone(), params.entries()[k].value.data().to_vec()));
    }
    grad_check(
        &point,
        |v| {
            let mut p = params.clone();
            for (k, vals) in keys.iter().zip(&v[1..]) {
                let (node, name) = k.rsplit_once(':').unwrap();
                p.get_mut(node, name)?.data_mut().copy_from_slice(vals);
            }
            let x = Tensor::from_vec(shape, v[0].clone())?;
            let pass = graph.forward(&p, &x, Mode::Train)?;
            let (loss, _) = tensor::softmax_xent(&pass.logits, &labels)?;
            let g = graph.backward(&p, &pass, &labels)?;
            let mut grads = vec![g.input.into_data()];
            for k in &keys {
                grads.push(g.params[k].data().to_vec());
            }
            Ok((loss, grads))
        },
        STEP,
        TOL,
    )
    .unwrap()
}

fn prpe_graph(op: &str, stride_input: usize) -> ArchitectureGraph {
    let cfg = json!({
        "input_shape": [stride_input, stride_input, 6],
        "nodes": [
            {"name": "blk", "op": op, "attrs": {"c_proj": 3, "r": 2, "c_out": 5}, "inputs": ["input"]},
            {"name": "pool", "op": "global_avg_pool", "inputs": ["blk"]},
            {"name": "fc", "op": "dense", "attrs": {"units": 3}, "inputs": ["pool"]},
            {"name": "head", "op": "softmax_head", "inputs": ["fc"]}
        ],
        "output": "head"
    });
    ArchitectureGraph::parse(&cfg.to_string()).unwrap()
}

pub fn prpe_composites() {
    for (op, res) in [("prpe", 4), ("prpe_s", 5)] {
        let g = prpe_graph(op, res);
        for seed in 0..SEEDS {
            let report = graph_check(&g, seed, 2);
            assert_passed(op, seed, &report);
        }
    }
}

/// Builds a small random DAG containing every op kind.
fn random_dag(seed: u64) -> ArchitectureGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919));
    // (name, h, w, c)
    let mut live: Vec<(String, usize, usize, usize)> = vec![(INPUT.into(), 6, 6, 3)];
    let mut nodes: Vec<Value> = Vec::new();
    let mut counter = 0;
    let mut fresh = |kind: &str| {
        counter += 1;
        format!("{kind}{counter}")
    };
    let mut kinds = vec![
        "conv", "batchnorm", "relu", "add", "concat", "replicate", "prpe", "prpe_s", "max_pool", "conv",
        "relu",
    ];
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, rng.random_range(0..=i));
    }
    for kind in kinds {
        let pick = rng.random_range(0..live.len());
        let (src, h, w, c) = live[pick].clone();
        let name = fresh(kind);
        let (node, shape) = match kind {
            "conv" => {
                let k = rng.random_range(1..=3);
                let out = rng.random_range(2..=5);
                let s = if h > 2 && rng.random_bool(0.3) { 2 } else { 1 };
                (
                    json!({"name": name, "op": "conv", "attrs": {"kernel": [k, k], "stride": [s, s], "out_channels": out}, "inputs": [src]}),
                    (h.div_ceil(s), w.div_ceil(s), out),
                )
            }
            "batchnorm" | "relu" => (json!({"name": name, "op": kind, "inputs": [src]}), (h, w, c)),
            "replicate" => {
                let r = rng.random_range(1..=3);
                (json!({"name": name, "op": "replicate", "attrs": {"r": r}, "inputs": [src]}), (h, w, c * r))
            }
            "max_pool" => (
                json!({"name": name, "op": "max_pool", "attrs": {"kernel": [2, 2], "stride": [2, 2]}, "inputs": [src]}),
                (h.div_ceil(2), w.div_ceil(2), c),
            ),
            "add" => {
                // a 1x1 projection from any same-resolution value makes a partner
                let partners: Vec<_> = live.iter().filter(|v| (v.1, v.2) == (h, w)).cloned().collect();
                let other = partners[rng.random_range(0..partners.len())].0.clone();
                let proj = format!("{name}_proj");
                nodes.push(json!({"name": proj, "op": "conv", "attrs": {"kernel": [1, 1], "out_channels": c}, "inputs": [other]}));
                (json!({"name": name, "op": "add", "inputs": [src, proj]}), (h, w, c))
            }
            "concat" => {
                let partners: Vec<_> = live.iter().filter(|v| (v.1, v.2) == (h, w)).cloned().collect();
                let other = &partners[rng.random_range(0..partners.len())];
                (json!({"name": name, "op": "concat", "inputs": [src, other.0]}), (h, w, c + other.3))
            }
            "prpe" | "prpe_s" => {
                let mut src = src;
                let mut c = c;
                if c < 2 {
                    let widen = format!("{name}_widen");
                    nodes.push(json!({"name": widen, "op": "conv", "attrs": {"kernel": [1, 1], "out_channels": 3}, "inputs": [src]}));
                    src = widen;
                    c = 3;
                }
                let c_proj = rng.random_range(1..c);
                let r = rng.random_range(1..=3);
                let c_out = rng.random_range(2..=5);
                let s = if kind == "prpe_s" { 2 } else { 1 };
                (
                    json!({"name": name, "op": kind, "attrs": {"c_proj": c_proj, "r": r, "c_out": c_out}, "inputs": [src]}),
                    (h.div_ceil(s), w.div_ceil(s), c_out),
                )
            }
            _ => unreachable!(),
        };
        nodes.push(node);
        live.push((name, shape.0, shape.1, shape.2));
    }
    let (last, ..) = live.last().unwrap().clone();
    let pooled = if rng.random_bool(0.5) {
        nodes.push(json!({"name": "gap", "op": "global_avg_pool", "inputs": [last]}));
        "gap".to_string()
    } else {
        last
    };
    nodes.push(json!({"name": "fc", "op": "dense", "attrs": {"units": 3}, "inputs": [pooled]}));
    nodes.push(json!({"name": "head", "op": "softmax_head", "inputs": ["fc"]}));
    let cfg = json!({"input_shape": [6, 6, 3], "nodes": nodes, "output": "head"});
    ArchitectureGraph::parse(&cfg.to_string()).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{cfg}"))
}

pub fn random_dags_with_every_op_kind() {
    for seed in 0..SEEDS {
        let g = random_dag(seed);
        let report = graph_check(&g, seed, 2);
        assert_passed("random dag", seed, &report);
    }
}

/// Every case, in a fixed order.
#[allow(dead_code)]
pub const CASES: &[(&str, fn())] = &[
    ("conv2d_variants", conv2d_variants),
    ("batchnorm_train_and_infer", batchnorm_train_and_infer),
    ("relu_away_from_kink", relu_away_from_kink),
    ("global_avg_pool_gradient", global_avg_pool_gradient),
    ("max_pool_gradient", max_pool_gradient),
    ("replicate_gradient", replicate_gradient),
    ("dense_gradient", dense_gradient),
    ("concat_and_add_gradients", concat_and_add_gradients),
    ("softmax_xent_gradient", softmax_xent_gradient),
    ("prpe_composites", prpe_composites),
    ("random_dags_with_every_op_kind", random_dags_with_every_op_kind),
];
