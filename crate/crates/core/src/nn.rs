//! Dense and tensor-network layers, two-hidden-layer architectures, and
//! their initialization.
//!
//! A [`TnLayer`] stores a two-core matrix product operator. Core `A` has
//! shape `(d, d, chi)` and holds the slices `A[:, :, alpha]`; core `B` is laid
//! out the same way. The `d^2 x d^2` weight matrix is
//! `W = sum_alpha A_alpha (x) B_alpha`, i.e.
//! `W[i*d + k, j*d + l] = sum_alpha A[i, j, alpha] * B[k, l, alpha]`,
//! and it is re-contracted inside the expression graph on every forward pass.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::autodiff::{ExprGraph, VarRef};
use crate::error::{Error, Result};
use crate::tensor::{GaussianRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Sine,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, g: &mut ExprGraph, v: VarRef) -> Result<VarRef> {
        match self {
            Activation::Tanh => g.tanh(v),
            Activation::Sine => g.sin(v),
            Activation::Relu => g.relu(v),
            Activation::Identity => Ok(v),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sine => "sine",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "sine" | "sin" => Ok(Activation::Sine),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Result<Self> {
        Ok(DenseLayer {
            weight: Tensor::zeros(&[output, input])?,
            bias: Tensor::zeros(&[output])?,
            activation,
        })
    }

    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let w = weight.dims();
        if w.len() != 2 || bias.dims() != [w[0]] {
            return Err(Error::ShapeMismatch {
                op: "dense layer",
                lhs: w.to_vec(),
                rhs: bias.dims().to_vec(),
            });
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TnLayer {
    /// `d x d x chi`, slice `alpha` is `A_alpha`.
    pub core_a: Tensor,
    /// `d x d x chi`, slice `alpha` is `B_alpha`.
    pub core_b: Tensor,
    /// `d^2`
    pub bias: Tensor,
    pub activation: Activation,
}

impl TnLayer {
    pub fn zeros(d: usize, chi: usize, activation: Activation) -> Result<Self> {
        Ok(TnLayer {
            core_a: Tensor::zeros(&[d, d, chi])?,
            core_b: Tensor::zeros(&[d, d, chi])?,
            bias: Tensor::zeros(&[d * d])?,
            activation,
        })
    }

    pub fn new(core_a: Tensor, core_b: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let a = core_a.dims();
        let ok = a.len() == 3 && a[0] == a[1] && core_b.dims() == a && bias.dims() == [a[0] * a[0]];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "tn layer",
                lhs: a.to_vec(),
                rhs: core_b.dims().to_vec(),
            });
        }
        Ok(TnLayer {
            core_a,
            core_b,
            bias,
            activation,
        })
    }

    /// Build from explicit slices `A_alpha`, `B_alpha` (each `d x d`).
    pub fn from_slices(a: &[Tensor], b: &[Tensor], activation: Activation) -> Result<Self> {
        let chi = a.len();
        if chi == 0 || b.len() != chi {
            return Err(Error::InvalidArgument(
                "need matching, nonempty slice lists".into(),
            ));
        }
        let d = a[0].dims()[0];
        let mut layer = Self::zeros(d, chi, activation)?;
        for alpha in 0..chi {
            for (src, dst) in [(&a[alpha], &mut layer.core_a), (&b[alpha], &mut layer.core_b)] {
                if src.dims() != [d, d] {
                    return Err(Error::ShapeMismatch {
                        op: "tn slice",
                        lhs: vec![d, d],
                        rhs: src.dims().to_vec(),
                    });
                }
                for i in 0..d {
                    for j in 0..d {
                        dst.data_mut()[(i * d + j) * chi + alpha] = src.at2(i, j);
                    }
                }
            }
        }
        Ok(layer)
    }

    pub fn phys_dim(&self) -> usize {
        self.core_a.dims()[0]
    }

    pub fn bond_dim(&self) -> usize {
        self.core_a.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.phys_dim() * self.phys_dim()
    }

    /// `2 chi d^2 + d^2`
    pub fn param_count(&self) -> usize {
        self.core_a.len() + self.core_b.len() + self.bias.len()
    }

    /// Contract the two cores (graph nodes of shape `d x d x chi`) over the
    /// bond index into the rank-4 tensor `T[i, j, k, l]`, then regroup it
    /// as the `d^2 x d^2` matrix with rows `(i, k)` and columns `(j, l)`.
    pub fn contract_in(g: &mut ExprGraph, core_a: VarRef, core_b: VarRef) -> Result<VarRef> {
        let dims = g.dims(core_a).to_vec();
        let (d, chi) = (dims[0], dims[2]);
        let a = g.reshape(core_a, &[d * d, chi])?;
        let b = g.reshape(core_b, &[d * d, chi])?;
        let bt = g.transpose(b)?;
        let t = g.matmul(a, bt)?;
        let t = g.reshape(t, &[d, d, d, d])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[d * d, d * d])
    }

    /// The contracted weight matrix as a plain tensor.
    pub fn contracted_weight(&self) -> Result<Tensor> {
        let mut g = ExprGraph::new();
        let a = g.constant(self.core_a.clone());
        let b = g.constant(self.core_b.clone());
        let w = Self::contract_in(&mut g, a, b)?;
        Ok(g.value(w).clone())
    }
}

/// Either kind of layer; both compute `activation(input W^T + b)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Tn(TnLayer),
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.input_dim(),
            Layer::Tn(l) => l.width(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.output_dim(),
            Layer::Tn(l) => l.width(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(l) => l.param_count(),
            Layer::Tn(l) => l.param_count(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(l) => l.activation,
            Layer::Tn(l) => l.activation,
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Tn(l) => vec![&l.core_a, &l.core_b, &l.bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Tn(l) => vec![&mut l.core_a, &mut l.core_b, &mut l.bias],
        }
    }

    /// Forward pass given graph nodes for this layer's parameters (in
    /// [`Network::params`] order).
    pub fn forward(&self, g: &mut ExprGraph, params: &[VarRef], input: VarRef) -> Result<VarRef> {
        let in_dims = g.dims(input).to_vec();
        if in_dims.len() != 2 || in_dims[1] != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "layer input",
                lhs: in_dims,
                rhs: vec![self.input_dim()],
            });
        }
        let (weight, bias) = match self {
            Layer::Dense(_) => (params[0], params[1]),
            Layer::Tn(_) => (TnLayer::contract_in(g, params[0], params[1])?, params[2]),
        };
        let wt = g.transpose(weight)?;
        let z = g.matmul(input, wt)?;
        let ones = g.constant(Tensor::ones(&[in_dims[0], 1])?);
        let b_row = g.reshape(bias, &[1, self.output_dim()])?;
        let b = g.matmul(ones, b_row)?;
        let z = g.add(z, b)?;
        self.activation().apply(g, z)
    }
}

/// Architectures named as in the benchmark literature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchKind {
    /// Dense `x` neurons, then dense `y` neurons.
    Dnn { x: usize, y: usize },
    /// Dense `x` neurons, then an `x -> x` TN layer with bond dimension `chi`.
    Tnn { x: usize, chi: usize },
}

impl ArchKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ArchKind::Dnn { .. } => "dnn",
            ArchKind::Tnn { .. } => "tnn",
        }
    }

    /// `(x, y)` for a DNN, `(x, chi)` for a TNN.
    pub fn widths(&self) -> (usize, usize) {
        match *self {
            ArchKind::Dnn { x, y } => (x, y),
            ArchKind::Tnn { x, chi } => (x, chi),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchKind::Dnn { x, y } => write!(f, "DNN({x},{y})"),
            ArchKind::Tnn { x, chi } => write!(f, "TNN({x},{chi})"),
        }
    }
}

/// Parses `DNN(6,35)`, `tnn(16,4)` or the colon form `tnn:16:4`.
impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArchitecture(format!("cannot parse architecture {s:?}"));
        let t = s.trim().to_ascii_lowercase();
        let (kind, rest) = t.split_at(3.min(t.len()));
        let rest = rest.trim_start_matches(['(', ':']).trim_end_matches(')');
        let nums: Vec<usize> = rest
            .split([',', ':'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match (kind, nums.as_slice()) {
            ("dnn", [x, y]) => Ok(ArchKind::Dnn { x: *x, y: *y }),
            ("tnn", [x, chi]) => Ok(ArchKind::Tnn { x: *x, chi: *chi }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// State dimension plus one (time is prepended).
    pub input_dim: usize,
}

impl ArchitectureSpec {
    pub fn new(kind: ArchKind, input_dim: usize) -> Self {
        ArchitectureSpec { kind, input_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArchitecture("input_dim must be positive".into()));
        }
        match self.kind {
            ArchKind::Dnn { x, y } if x == 0 || y == 0 => Err(Error::InvalidArchitecture(format!(
                "{}: widths must be positive",
                self.kind
            ))),
            ArchKind::Tnn { x, chi } => {
                if chi == 0 {
                    return Err(Error::InvalidArchitecture(format!(
                        "{}: bond dimension must be at least 1",
                        self.kind
                    )));
                }
                if perfect_sqrt(x).is_none() {
                    return Err(Error::InvalidArchitecture(format!(
                        "{}: width {x} is not a perfect square",
                        self.kind
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Trainable scalars of the built network, from the closed-form counts.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let n = self.input_dim;
        Ok(match self.kind {
            ArchKind::Dnn { x, y } => (n + 1) * x + (x + 1) * y + (y + 1),
            ArchKind::Tnn { x, chi } => (n + 1) * x + 2 * chi * x + x + (x + 1),
        })
    }
}

pub fn perfect_sqrt(x: usize) -> Option<usize> {
    let r = (x as f64).sqrt().round() as usize;
    (r > 0 && r * r == x).then_some(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum InitScheme {
    /// Dense: `N(0, 2/(fan_in+fan_out))`. TN cores: `N(0, s^2)` with
    /// `s = (sigma_glorot^2 / chi)^(1/4)` so the contracted matrix has the
    /// Glorot variance of an equally sized dense layer.
    #[default]
    Glorot,
    /// As [`InitScheme::Glorot`], then each TN layer's cores are rescaled so
    /// the sample standard deviation of its contracted matrix equals the
    /// dense Glorot target.
    MatchedMagnitude,
    /// TN cores drawn like a `d x d` dense layer, ignoring the contraction.
    /// Produces a contracted matrix whose magnitude differs from a dense layer.
    CoreGlorot,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "glorot" => Ok(InitScheme::Glorot),
            "matched" | "matched_magnitude" => Ok(InitScheme::MatchedMagnitude),
            "core_glorot" => Ok(InitScheme::CoreGlorot),
            other => Err(Error::InvalidArgument(format!("unknown init scheme {other:?}"))),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Glorot => "glorot",
            InitScheme::MatchedMagnitude => "matched_magnitude",
            InitScheme::CoreGlorot => "core_glorot",
        })
    }
}

fn glorot_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Scalar-output network `u(t, x)` over inputs `[t, x_1, ..., x_d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
}

/// Nodes produced by [`Network::eval`].
#[derive(Clone, Copy, Debug)]
pub struct NetworkEval {
    /// `batch x 1`
    pub u: VarRef,
    /// `batch x d`, differentiable in the parameters.
    pub grad_x: VarRef,
    /// The `batch x d` state input node.
    pub x: VarRef,
}

impl Network {
    pub fn from_layers(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim() != width {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i} expects width {}, previous width is {width}",
                    layer.input_dim()
                )));
            }
            width = layer.output_dim();
        }
        if !layers.is_empty() && width != 1 {
            return Err(Error::InvalidArchitecture(format!(
                "last layer must have width 1, got {width}"
            )));
        }
        Ok(Network { layers, input_dim })
    }

    pub fn empty(input_dim: usize) -> Self {
        Network {
            layers: Vec::new(),
            input_dim,
        }
    }

    /// Build and initialize the architecture: dense `(input -> x)`, then the
    /// second hidden layer (dense `x -> y` or TN `x -> x`), then a dense
    /// identity output layer.
    pub fn build(
        spec: &ArchitectureSpec,
        activation: Activation,
        init: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let n = spec.input_dim;
        let layers = match spec.kind {
            ArchKind::Dnn { x, y } => vec![
                Layer::Dense(DenseLayer::zeros(n, x, activation)?),
                Layer::Dense(DenseLayer::zeros(x, y, activation)?),
                Layer::Dense(DenseLayer::zeros(y, 1, Activation::Identity)?),
            ],
            ArchKind::Tnn { x, chi } => {
                let d = perfect_sqrt(x).expect("validated");
                vec![
                    Layer::Dense(DenseLayer::zeros(n, x, activation)?),
                    Layer::Tn(TnLayer::zeros(d, chi, activation)?),
                    Layer::Dense(DenseLayer::zeros(x, 1, Activation::Identity)?),
                ]
            }
        };
        let mut net = Network::from_layers(n, layers)?;
        match init {
            InitScheme::MatchedMagnitude => net.init_matched_magnitude(seed)?,
            other => net.init(other, seed)?,
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn has_tn_layer(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Tn(_)))
    }

    /// All parameter tensors, layer by layer (dense: weight, bias; TN: core
    /// A, core B, bias).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Re-draw every parameter; biases become zero.
    pub fn init(&mut self, scheme: InitScheme, seed: u64) -> Result<()> {
        let mut rng = GaussianRng::new(seed);
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => {
                    let sd = glorot_std(l.input_dim(), l.output_dim());
                    l.weight = Tensor::randn_with(l.weight.dims(), 0.0, sd, &mut rng)?;
                    l.bias = Tensor::zeros(l.bias.dims())?;
                }
                Layer::Tn(l) => {
                    let (d, chi) = (l.phys_dim(), l.bond_dim());
                    let sd = match scheme {
                        InitScheme::CoreGlorot => glorot_std(d, d),
                        _ => {
                            let target = glorot_std(d * d, d * d);
                            (target * target / chi as f64).powf(0.25)
                        }
                    };
                    let dims = l.core_a.dims().to_vec();
                    l.core_a = Tensor::randn_with(&dims, 0.0, sd, &mut rng)?;
                    l.core_b = Tensor::randn_with(&dims, 0.0, sd, &mut rng)?;
                    l.bias = Tensor::zeros(l.bias.dims())?;
                }
            }
        }
        Ok(())
    }

    pub fn init_glorot(&mut self, seed: u64) -> Result<()> {
        self.init(InitScheme::Glorot, seed)
    }

    /// Glorot initialization followed by rescaling each TN layer's cores so
    /// that the entries of its contracted weight matrix have the same sample
    /// standard deviation as a Glorot-initialized dense layer of that size.
    pub fn init_matched_magnitude(&mut self, seed: u64) -> Result<()> {
        if !self.has_tn_layer() {
            return Err(Error::InvalidArgument(
                "matched-magnitude initialization needs a TN layer".into(),
            ));
        }
        self.init(InitScheme::Glorot, seed)?;
        for layer in &mut self.layers {
            if let Layer::Tn(l) = layer {
                let target = glorot_std(l.width(), l.width());
                let actual = sample_std(l.contracted_weight()?.data());
                // W is bilinear in the cores: scaling both by c scales W by c^2.
                let c = (target / actual).sqrt();
                l.core_a = l.core_a.scale(c);
                l.core_b = l.core_b.scale(c);
            }
        }
        Ok(())
    }

    /// Insert every parameter into `g` as a differentiable variable.
    pub fn bind(&self, g: &mut ExprGraph) -> Vec<VarRef> {
        self.params().into_iter().map(|p| g.variable(p.clone())).collect()
    }

    /// Forward pass of a `batch x input_dim` node using bound parameters.
    pub fn forward(&self, g: &mut ExprGraph, params: &[VarRef], input: VarRef) -> Result<VarRef> {
        let mut h = input;
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.params().len();
            h = layer.forward(g, &params[offset..offset + n], h)?;
            offset += n;
        }
        Ok(h)
    }

    /// Evaluate `u(t, x)` and `grad_x u(t, x)` for a batch. `t` is
    /// `batch x 1`, `x` is `batch x d`. The gradient is recorded in the graph
    /// so a loss built from it stays differentiable in the parameters.
    pub fn eval(&self, g: &mut ExprGraph, params: &[VarRef], t: Tensor, x: Tensor) -> Result<NetworkEval> {
        let (td, xd) = (t.dims().to_vec(), x.dims().to_vec());
        if td.len() != 2 || xd.len() != 2 || td[1] != 1 || td[0] != xd[0] || xd[1] + 1 != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "network eval",
                lhs: td,
                rhs: xd,
            });
        }
        let t = g.constant(t);
        let x = g.variable(x);
        let input = g.concat(&[t, x], 1)?;
        let u = self.forward(g, params, input)?;
        let total = g.sum(u)?;
        let grads = g.grad(total, &[x], true)?;
        let grad_x = grads.node(x).expect("create_graph returns nodes");
        Ok(NetworkEval { u, grad_x, x })
    }

    /// Plain forward evaluation of `u` at a single `(t, x)`.
    pub fn value_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        let mut g = ExprGraph::new();
        let params: Vec<VarRef> = self.params().into_iter().map(|p| g.constant(p.clone())).collect();
        let mut row = Vec::with_capacity(x.len() + 1);
        row.push(t);
        row.extend_from_slice(x);
        let input = g.constant(Tensor::from_vec(&[1, row.len()], row)?);
        let u = self.forward(&mut g, &params, input)?;
        Ok(g.value(u).item())
    }

    /// Write weights in the line-oriented text format:
    ///
    /// ```text
    /// tnnpde-network 1
    /// input_dim <n>
    /// layers <count>
    /// layer dense|tn <activation>
    /// tensor <rank> <dim_1> ... <dim_rank>
    /// <values, row-major, whitespace separated>
    /// ```
    ///
    /// Each layer line is followed by its parameter tensors in
    /// [`Network::params`] order. Values use the shortest representation that
    /// parses back to the same `f64`.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tnnpde-network 1")?;
        writeln!(w, "input_dim {}", self.input_dim)?;
        writeln!(w, "layers {}", self.layers.len())?;
        for layer in &self.layers {
            let kind = match layer {
                Layer::Dense(_) => "dense",
                Layer::Tn(_) => "tn",
            };
            writeln!(w, "layer {kind} {}", layer.activation())?;
            for p in layer.params() {
                let dims: Vec<String> = p.dims().iter().map(|d| d.to_string()).collect();
                writeln!(w, "tensor {} {}", dims.len(), dims.join(" "))?;
                let vals: Vec<String> = p.data().iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", vals.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let fmt_err = |m: String| Error::InvalidArgument(format!("network file: {m}"));
        let mut lines = r.lines().map(|l| l.map_err(|e| fmt_err(e.to_string())));
        let mut next = move || -> Result<String> {
            lines
                .next()
                .unwrap_or_else(|| Err(fmt_err("unexpected end of file".into())))
        };
        let header = next()?;
        if header.trim() != "tnnpde-network 1" {
            return Err(fmt_err(format!("bad header {header:?}")));
        }
        let field = |line: String, key: &str| -> Result<usize> {
            let mut it = line.split_whitespace();
            match (it.next(), it.next().and_then(|v| v.parse().ok())) {
                (Some(k), Some(v)) if k == key => Ok(v),
                _ => Err(fmt_err(format!("expected `{key} <n>`, got {line:?}"))),
            }
        };
        let input_dim = field(next()?, "input_dim")?;
        let count = field(next()?, "layers")?;
        let read_tensor = |next: &mut dyn FnMut() -> Result<String>| -> Result<Tensor> {
            let head = next()?;
            let nums: Vec<usize> = head
                .split_whitespace()
                .skip(1)
                .map(|v| {
                    v.parse()
                        .map_err(|_| fmt_err(format!("bad tensor line {head:?}")))
                })
                .collect::<Result<_>>()?;
            if !head.starts_with("tensor") || nums.is_empty() || nums[0] + 1 != nums.len() {
                return Err(fmt_err(format!("bad tensor line {head:?}")));
            }
            let vals: Vec<f64> = next()?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| fmt_err(format!("bad value {v:?}"))))
                .collect::<Result<_>>()?;
            Tensor::from_vec(&nums[1..], vals)
        };
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let (kind, act) = match parts.as_slice() {
                ["layer", kind, act] => (kind.to_string(), act.parse::<Activation>()?),
                _ => return Err(fmt_err(format!("bad layer line {line:?}"))),
            };
            layers.push(match kind.as_str() {
                "dense" => {
                    let w = read_tensor(&mut next)?;
                    let b = read_tensor(&mut next)?;
                    Layer::Dense(DenseLayer::new(w, b, act)?)
                }
                "tn" => {
                    let a = read_tensor(&mut next)?;
                    let b = read_tensor(&mut next)?;
                    let bias = read_tensor(&mut next)?;
                    Layer::Tn(TnLayer::new(a, b, bias, act)?)
                }
                other => return Err(fmt_err(format!("unknown layer kind {other:?}"))),
            });
        }
        Network::from_layers(input_dim, layers)
    }
}
