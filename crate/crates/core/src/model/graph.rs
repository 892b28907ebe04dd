use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autotune::LayerSignature;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::nn::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormState, Mode};
use crate::nn::conv::{conv2d_backward_with, conv2d_forward, ConvGeometry, ConvParams, ConvStrategy};
use crate::nn::linear::{linear, linear_backward};
use crate::nn::pool::{global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward};
use crate::nn::{relu, relu_backward};
use crate::tensor::{Scalar, Shape4, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T: Scalar> {
    Input,
    Conv(ConvParams<T>),
    BatchNorm(BatchNormState<T>),
    Relu,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    /// `weight` is `[in, out]`.
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    /// Elementwise sum of two equally shaped inputs (residual join).
    Add,
}

impl<T: Scalar> LayerKind<T> {
    fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode<T: Scalar> {
    pub name: String,
    pub kind: LayerKind<T>,
    pub inputs: Vec<NodeId>,
}

/// One trainable tensor in the registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether weight decay applies (conv and linear weights only).
    pub decay: bool,
}

#[derive(Debug, Clone)]
enum Cache<T: Scalar> {
    Empty,
    Conv(ConvStrategy),
    Bn(BatchNormCache<T>),
    MaxPool { input: Shape4, argmax: Vec<usize> },
    Shape(Vec<usize>),
}

/// Gradients from [`Model::backward`], parameters in registry order.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

/// A topologically ordered layer graph. Node 0 is the input.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    name: String,
    nodes: Vec<LayerNode<T>>,
    output: NodeId,
    input_chw: [usize; 3],
    num_classes: usize,
    acts: Vec<Option<Tensor<T>>>,
    caches: Vec<Cache<T>>,
}

/// Incrementally builds a [`Model`]; every `add_*` call returns the new node id.
pub struct GraphBuilder<T: Scalar> {
    nodes: Vec<LayerNode<T>>,
    input_chw: [usize; 3],
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(input_chw: [usize; 3]) -> Self {
        GraphBuilder {
            nodes: vec![LayerNode { name: "input".into(), kind: LayerKind::Input, inputs: vec![] }],
            input_chw,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind<T>, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(LayerNode { name: name.into(), kind, inputs: inputs.to_vec() });
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, from: NodeId, cin: usize, cout: usize, k: usize, s: usize, p: usize, bias: bool) -> NodeId {
        let g = ConvGeometry { in_channels: cin, out_channels: cout, kernel: k, stride: s, padding: p };
        let params = ConvParams::zeros(g, bias).expect("valid conv geometry");
        self.push(name, LayerKind::Conv(params), &[from])
    }

    pub fn bn(&mut self, name: &str, from: NodeId, channels: usize) -> NodeId {
        self.push(name, LayerKind::BatchNorm(BatchNormState::new(channels).expect("channels >= 1")), &[from])
    }

    pub fn relu(&mut self, name: &str, from: NodeId) -> NodeId {
        self.push(name, LayerKind::Relu, &[from])
    }

    pub fn max_pool(&mut self, name: &str, from: NodeId, window: usize, stride: usize) -> NodeId {
        self.push(name, LayerKind::MaxPool { window, stride }, &[from])
    }

    pub fn global_avg_pool(&mut self, name: &str, from: NodeId) -> NodeId {
        self.push(name, LayerKind::GlobalAvgPool, &[from])
    }

    pub fn flatten(&mut self, name: &str, from: NodeId) -> NodeId {
        self.push(name, LayerKind::Flatten, &[from])
    }

    pub fn linear(&mut self, name: &str, from: NodeId, din: usize, dout: usize) -> NodeId {
        let weight = Tensor::zeros(&[din, dout]).expect("positive dims");
        let bias = Tensor::zeros(&[dout]).expect("positive dims");
        self.push(name, LayerKind::Linear { weight, bias }, &[from])
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, LayerKind::Add, &[a, b])
    }

    /// Finalizes the graph with `output` as the logits node and
    /// initializes parameters from `seed`.
    pub fn build(self, name: &str, output: NodeId, num_classes: usize, seed: u64) -> Result<Model<T>> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.len() != n.kind.arity() {
                return Err(Error::Config(format!("node {} expects {} inputs", n.name, n.kind.arity())));
            }
            if n.inputs.iter().any(|&j| j >= i) {
                return Err(Error::Config(format!("node {} has a forward or self edge", n.name)));
            }
        }
        if output >= self.nodes.len() {
            return Err(Error::Config(format!("output node {output} does not exist")));
        }
        let len = self.nodes.len();
        let mut m = Model {
            name: name.to_string(),
            nodes: self.nodes,
            output,
            input_chw: self.input_chw,
            num_classes,
            acts: vec![None; len],
            caches: vec![Cache::Empty; len],
        };
        m.init(seed);
        Ok(m)
    }
}

fn param_name(node: &str, field: &str) -> String {
    format!("{node}.{field}")
}

impl<T: Scalar> Model<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_chw(&self) -> [usize; 3] {
        self.input_chw
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    /// Re-initializes parameters: Kaiming fan-out normal for convs, uniform
    /// `+-1/sqrt(fan_in)` for linear weights, zero biases and beta, unit gamma.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for node in &mut self.nodes {
            match &mut node.kind {
                LayerKind::Conv(p) => {
                    let g = p.geometry;
                    let std = (2.0 / (g.out_channels * g.kernel * g.kernel) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    p.weight.data_mut().iter_mut().for_each(|w| *w = T::lit(normal.sample(&mut rng)));
                    if let Some(b) = &mut p.bias {
                        b.data_mut().fill(T::zero());
                    }
                }
                LayerKind::BatchNorm(st) => {
                    let c = st.channels();
                    *st = BatchNormState::new(c).expect("channels >= 1");
                }
                LayerKind::Linear { weight, bias } => {
                    let bound = 1.0 / (weight.shape()[0] as f64).sqrt();
                    weight.data_mut().iter_mut().for_each(|w| *w = T::lit(rng.gen_range(-bound..bound)));
                    bias.data_mut().fill(T::zero());
                }
                _ => {}
            }
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut push = |n: &str, f: &str, t: &Tensor<T>, decay| {
            out.push(ParamInfo { name: param_name(n, f), shape: t.shape().to_vec(), decay })
        };
        for node in &self.nodes {
            match &node.kind {
                LayerKind::Conv(p) => {
                    push(&node.name, "weight", &p.weight, true);
                    if let Some(b) = &p.bias {
                        push(&node.name, "bias", b, false);
                    }
                }
                LayerKind::BatchNorm(st) => {
                    push(&node.name, "weight", &st.gamma, false);
                    push(&node.name, "bias", &st.beta, false);
                }
                LayerKind::Linear { weight, bias } => {
                    push(&node.name, "weight", weight, true);
                    push(&node.name, "bias", bias, false);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.nodes.iter().flat_map(|n| node_params(&n.kind)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match &mut node.kind {
                LayerKind::Conv(p) => {
                    out.push(&mut p.weight);
                    if let Some(b) = &mut p.bias {
                        out.push(b);
                    }
                }
                LayerKind::BatchNorm(st) => {
                    out.push(&mut st.gamma);
                    out.push(&mut st.beta);
                }
                LayerKind::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics) by name.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let LayerKind::BatchNorm(st) = &node.kind {
                out.push((param_name(&node.name, "running_mean"), &st.running_mean));
                out.push((param_name(&node.name, "running_var"), &st.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            if let LayerKind::BatchNorm(st) = &mut node.kind {
                out.push((param_name(&node.name, "running_mean"), &mut st.running_mean));
                out.push((param_name(&node.name, "running_var"), &mut st.running_var));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn count_nodes(&self, pred: impl Fn(&LayerNode<T>) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(n)).count()
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| LayerNode {
                name: n.name.clone(),
                inputs: n.inputs.clone(),
                kind: match &n.kind {
                    LayerKind::Input => LayerKind::Input,
                    LayerKind::Conv(p) => LayerKind::Conv(ConvParams {
                        geometry: p.geometry,
                        weight: p.weight.cast(),
                        bias: p.bias.as_ref().map(|b| b.cast()),
                    }),
                    LayerKind::BatchNorm(st) => LayerKind::BatchNorm(BatchNormState {
                        gamma: st.gamma.cast(),
                        beta: st.beta.cast(),
                        running_mean: st.running_mean.cast(),
                        running_var: st.running_var.cast(),
                        momentum: U::from_f64(st.momentum.to_f64().unwrap()).unwrap(),
                        eps: U::from_f64(st.eps.to_f64().unwrap()).unwrap(),
                    }),
                    LayerKind::Relu => LayerKind::Relu,
                    LayerKind::MaxPool { window, stride } => LayerKind::MaxPool { window: *window, stride: *stride },
                    LayerKind::GlobalAvgPool => LayerKind::GlobalAvgPool,
                    LayerKind::Flatten => LayerKind::Flatten,
                    LayerKind::Linear { weight, bias } => LayerKind::Linear { weight: weight.cast(), bias: bias.cast() },
                    LayerKind::Add => LayerKind::Add,
                },
            })
            .collect::<Vec<_>>();
        let len = nodes.len();
        Model {
            name: self.name.clone(),
            nodes,
            output: self.output,
            input_chw: self.input_chw,
            num_classes: self.num_classes,
            acts: vec![None; len],
            caches: vec![Cache::Empty; len],
        }
    }

    /// Conv layer signatures encountered for an input batch of `n` items.
    pub fn conv_signatures(&self, n: usize) -> Result<Vec<LayerSignature>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        let mut sigs = Vec::new();
        for node in &self.nodes {
            let shape = match &node.kind {
                LayerKind::Input => vec![n, self.input_chw[0], self.input_chw[1], self.input_chw[2]],
                LayerKind::Conv(p) => {
                    let s = shape4_of(&shapes[node.inputs[0]])?;
                    let (ho, wo) = p.geometry.output_hw(s.h, s.w)?;
                    sigs.push(LayerSignature::new(s, &p.geometry));
                    vec![n, p.geometry.out_channels, ho, wo]
                }
                LayerKind::MaxPool { window, stride } => {
                    let s = shape4_of(&shapes[node.inputs[0]])?;
                    let (ho, wo) = crate::nn::pool::max_pool_output_hw(s.h, s.w, *window, *stride)?;
                    vec![n, s.c, ho, wo]
                }
                LayerKind::GlobalAvgPool => {
                    let s = shape4_of(&shapes[node.inputs[0]])?;
                    vec![n, s.c, 1, 1]
                }
                LayerKind::Flatten => {
                    let s = &shapes[node.inputs[0]];
                    vec![n, s[1..].iter().product()]
                }
                LayerKind::Linear { weight, .. } => vec![n, weight.shape()[1]],
                _ => shapes[node.inputs[0]].clone(),
            };
            shapes.push(shape);
        }
        sigs.dedup();
        Ok(sigs)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape4()?;
        if [s.c, s.h, s.w] != self.input_chw {
            return Err(Error::InvalidShape(format!(
                "{} expects N x {:?} input, got {:?}",
                self.name,
                self.input_chw,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs the graph in node order. Train mode keeps the activations needed
    /// by [`Model::backward`] and updates batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, engine: &Engine) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let len = self.nodes.len();
        let mut last_use = vec![0usize; len];
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                last_use[j] = i;
            }
        }
        last_use[self.output] = len;
        self.acts.iter_mut().for_each(|a| *a = None);
        self.caches.iter_mut().for_each(|c| *c = Cache::Empty);
        self.acts[0] = Some(x.clone());

        for i in 1..len {
            let (out, cache, running) = {
                let node = &self.nodes[i];
                let input = |k: usize| -> &Tensor<T> { self.acts[node.inputs[k]].as_ref().expect("input computed") };
                let at = |e: Error| Error::InvalidShape(format!("node {}: {e}", node.name));
                match &node.kind {
                    LayerKind::Input => unreachable!("input is node 0"),
                    LayerKind::Conv(p) => {
                        let x = input(0);
                        let sig = LayerSignature::new(x.shape4()?, &p.geometry);
                        let strategy = engine.conv_strategy(&sig);
                        (conv2d_forward(x, p, strategy).map_err(at)?, Cache::Conv(strategy), None)
                    }
                    LayerKind::BatchNorm(st) => {
                        let out = batchnorm_forward(input(0), st, mode).map_err(at)?;
                        (out.output, Cache::Bn(out.cache), out.running)
                    }
                    LayerKind::Relu => (relu(input(0)), Cache::Empty, None),
                    LayerKind::MaxPool { window, stride } => {
                        let x = input(0);
                        let out = max_pool(x, *window, *stride).map_err(at)?;
                        (out.output, Cache::MaxPool { input: x.shape4()?, argmax: out.argmax }, None)
                    }
                    LayerKind::GlobalAvgPool => {
                        let x = input(0);
                        (global_avg_pool(x).map_err(at)?, Cache::Shape(x.shape().to_vec()), None)
                    }
                    LayerKind::Flatten => {
                        let x = input(0);
                        let n = x.shape()[0];
                        (x.reshape(&[n, x.numel() / n])?, Cache::Shape(x.shape().to_vec()), None)
                    }
                    LayerKind::Linear { weight, bias } => (linear(input(0), weight, bias).map_err(at)?, Cache::Empty, None),
                    LayerKind::Add => {
                        let (a, b) = (input(0), input(1));
                        if a.shape() != b.shape() {
                            return Err(Error::ShapeMismatch {
                                op: "residual add",
                                lhs: a.shape().to_vec(),
                                rhs: b.shape().to_vec(),
                            });
                        }
                        (a.add(b)?, Cache::Empty, None)
                    }
                }
            };
            if let (Some((rm, rv)), LayerKind::BatchNorm(st)) = (running, &mut self.nodes[i].kind) {
                st.running_mean = rm;
                st.running_var = rv;
            }
            self.acts[i] = Some(out);
            self.caches[i] = cache;
            if mode == Mode::Eval {
                for k in 0..self.nodes[i].inputs.len() {
                    let j = self.nodes[i].inputs[k];
                    if last_use[j] == i {
                        self.acts[j] = None;
                    }
                }
            }
        }
        let logits = self.acts[self.output].clone().expect("output computed");
        if mode == Mode::Eval {
            self.acts.iter_mut().for_each(|a| *a = None);
        }
        Ok(logits)
    }

    /// Backpropagates `grad_out` (gradient of the loss w.r.t. the logits)
    /// through the graph recorded by the last train-mode forward.
    pub fn backward(&mut self, grad_out: &Tensor<T>, engine: &Engine) -> Result<Gradients<T>> {
        let len = self.nodes.len();
        let out_shape = match &self.acts[self.output] {
            Some(t) => t.shape().to_vec(),
            None => return Err(Error::Config("backward called without a train-mode forward".into())),
        };
        if grad_out.shape() != out_shape {
            return Err(Error::ShapeMismatch { op: "model backward", lhs: grad_out.shape().to_vec(), rhs: out_shape });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; len];
        grads[self.output] = Some(grad_out.clone());
        // per-node parameter grads, assembled in registry order afterwards
        let mut pgrads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); len];

        for i in (1..len).rev() {
            let Some(g) = grads[i].take() else {
                // not on any path to the output
                pgrads[i] = node_params(&self.nodes[i].kind).into_iter().map(Tensor::zeros_like).collect();
                continue;
            };
            let node = &self.nodes[i];
            let act = |k: usize| -> &Tensor<T> { self.acts[node.inputs[k]].as_ref().expect("activation kept") };
            let at = |e: Error| Error::InvalidShape(format!("node {} backward: {e}", node.name));
            let input_grads: Vec<Tensor<T>> = match (&node.kind, &self.caches[i]) {
                (LayerKind::Conv(p), Cache::Conv(strategy)) => {
                    let r = conv2d_backward_with(act(0), p, *strategy, &g, engine.deterministic()).map_err(at)?;
                    pgrads[i].push(r.grad_weight);
                    if let Some(b) = r.grad_bias {
                        pgrads[i].push(b);
                    }
                    vec![r.grad_x]
                }
                (LayerKind::BatchNorm(st), Cache::Bn(cache)) => {
                    let r = batchnorm_backward(cache, st, &g).map_err(at)?;
                    pgrads[i].push(r.grad_gamma);
                    pgrads[i].push(r.grad_beta);
                    vec![r.grad_x]
                }
                (LayerKind::Relu, _) => {
                    let y = self.acts[i].as_ref().expect("activation kept");
                    vec![relu_backward(y, &g).map_err(at)?]
                }
                (LayerKind::MaxPool { .. }, Cache::MaxPool { input, argmax }) => {
                    vec![max_pool_backward(*input, argmax, &g).map_err(at)?]
                }
                (LayerKind::GlobalAvgPool, Cache::Shape(s)) => {
                    vec![global_avg_pool_backward(shape4_of(s)?, &g).map_err(at)?]
                }
                (LayerKind::Flatten, Cache::Shape(s)) => vec![g.into_reshaped(s)?],
                (LayerKind::Linear { weight, bias }, _) => {
                    let r = linear_backward(act(0), weight, bias, &g).map_err(at)?;
                    pgrads[i].push(r.grad_weight);
                    pgrads[i].push(r.grad_bias);
                    vec![r.grad_x]
                }
                (LayerKind::Add, _) => vec![g.clone(), g],
                _ => return Err(Error::Config(format!("node {} has no cached forward state", node.name))),
            };
            for (k, gi) in input_grads.into_iter().enumerate() {
                let j = node.inputs[k];
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => acc.add(&gi)?,
                    None => gi,
                });
            }
        }
        let input = grads[0].take().unwrap_or_else(|| Tensor::zeros_like(self.acts[0].as_ref().expect("input kept")));
        let params: Vec<Tensor<T>> = pgrads.into_iter().flatten().collect();
        debug_assert_eq!(params.len(), self.params().len());
        Ok(Gradients { params, input })
    }

    /// Which side of every piecewise-linear switch (ReLU sign, max-pool
    /// winner) the last train-mode forward took. Two forwards with equal
    /// patterns evaluated the same smooth branch of the network.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match (&node.kind, &self.caches[i], &self.acts[i]) {
                (LayerKind::Relu, _, Some(y)) => {
                    for chunk in y.data().chunks(64) {
                        out.push(chunk.iter().enumerate().fold(0u64, |m, (b, &v)| m | (u64::from(v > T::zero()) << b)));
                    }
                }
                (LayerKind::MaxPool { .. }, Cache::MaxPool { argmax, .. }, _) => out.extend(argmax.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        out
    }

    /// Drops cached activations.
    pub fn clear(&mut self) {
        self.acts.iter_mut().for_each(|a| *a = None);
        self.caches.iter_mut().for_each(|c| *c = Cache::Empty);
    }
}

fn node_params<T: Scalar>(kind: &LayerKind<T>) -> Vec<&Tensor<T>> {
    match kind {
        LayerKind::Conv(p) => std::iter::once(&p.weight).chain(p.bias.as_ref()).collect(),
        LayerKind::BatchNorm(st) => vec![&st.gamma, &st.beta],
        LayerKind::Linear { weight, bias } => vec![weight, bias],
        _ => Vec::new(),
    }
}

fn shape4_of(s: &[usize]) -> Result<Shape4> {
    match *s {
        [n, c, h, w] => Shape4::new(n, c, h, w),
        _ => Err(Error::InvalidShape(format!("expected NCHW, got {s:?}"))),
    }
}
