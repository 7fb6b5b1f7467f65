//! Benchmark problems: Black-Scholes-Barenblatt and Hamilton-Jacobi-Bellman.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::autodiff::{ExprGraph, VarRef};
use crate::error::{Error, Result};
use crate::fbsde::{loss, rollout, Dynamics, FbsdeProblem, LossKind, PathBatch, SolutionModel};
use crate::nn::NetworkEval;
use crate::tensor::{GaussianRng, Tensor};

/// Black-Scholes-Barenblatt:
/// `dX = sigma diag(X) dW`, `dY = r (Y - Z'X) dt + sigma Z' diag(X) dW`,
/// `Y_T = |X_T|^2`, with solution `u(t, x) = exp((r + sigma^2)(T - t)) |x|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct BsbParams {
    pub dim: usize,
    pub horizon: f64,
    pub sigma: f64,
    pub rate: f64,
    pub x0: Vec<f64>,
    pub steps: usize,
}

impl Default for BsbParams {
    fn default() -> Self {
        BsbParams {
            dim: 10,
            horizon: 1.0,
            sigma: 0.4,
            rate: 0.05,
            x0: vec![1.0; 10],
            steps: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bsb {
    pub sigma: f64,
    pub rate: f64,
    pub horizon: f64,
}

impl Bsb {
    pub fn exact_value(&self, t: f64, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().map(|v| v * v).sum();
        ((self.rate + self.sigma * self.sigma) * (self.horizon - t)).exp() * sq
    }
}

impl Dynamics for Bsb {
    fn drift(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion(&self, _t: f64, x: &[f64], _y: f64, dw: &[f64], out: &mut [f64]) {
        for ((o, xi), w) in out.iter_mut().zip(x).zip(dw) {
            *o = self.sigma * xi * w;
        }
    }

    fn driver(&self, _t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let zx: f64 = z.iter().zip(x).map(|(a, b)| a * b).sum();
        self.rate * (y - zx)
    }

    fn driver_graph(
        &self,
        g: &mut ExprGraph,
        _t: &[f64],
        x: &Tensor,
        y: VarRef,
        z: VarRef,
    ) -> Result<VarRef> {
        let xc = g.constant(x.clone());
        let zx = g.mul(z, xc)?;
        let zx = g.row_sum(zx)?;
        let diff = g.sub(y, zx)?;
        g.scale(diff, self.rate)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn exact(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some(self.exact_value(t, x))
    }
}

pub fn bsb_problem(params: &BsbParams) -> Result<FbsdeProblem> {
    if params.x0.len() != params.dim {
        return Err(Error::InvalidArgument(format!(
            "x0 has {} entries, dim is {}",
            params.x0.len(),
            params.dim
        )));
    }
    let dynamics = Bsb {
        sigma: params.sigma,
        rate: params.rate,
        horizon: params.horizon,
    };
    FbsdeProblem::new(
        "bsb",
        params.horizon,
        params.steps,
        params.x0.clone(),
        Arc::new(dynamics),
    )
}

/// Hamilton-Jacobi-Bellman:
/// `dX = sigma dW`, `dY = |Z|^2 dt + sigma Z' dW`,
/// `Y_T = ln(0.5 (1 + |X_T|^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct HjbParams {
    pub dim: usize,
    pub horizon: f64,
    pub sigma: f64,
    pub x0: Vec<f64>,
    pub steps: usize,
    pub mc_samples: usize,
}

impl Default for HjbParams {
    fn default() -> Self {
        Self::with_dim(100)
    }
}

impl HjbParams {
    /// Same coefficients in a different dimension (e.g. 10 for quick runs).
    pub fn with_dim(dim: usize) -> Self {
        HjbParams {
            dim,
            horizon: 1.0,
            sigma: std::f64::consts::SQRT_2,
            x0: vec![0.0; dim],
            steps: 50,
            mc_samples: 100_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hjb {
    pub sigma: f64,
    pub horizon: f64,
}

pub fn hjb_terminal(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    (0.5 * (1.0 + sq)).ln()
}

impl Dynamics for Hjb {
    fn drift(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _y: f64, dw: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(dw) {
            *o = self.sigma * w;
        }
    }

    fn driver(&self, _t: f64, _x: &[f64], _y: f64, z: &[f64]) -> f64 {
        z.iter().map(|v| v * v).sum()
    }

    fn driver_graph(
        &self,
        g: &mut ExprGraph,
        _t: &[f64],
        _x: &Tensor,
        _y: VarRef,
        z: VarRef,
    ) -> Result<VarRef> {
        let sq = g.square(z)?;
        g.row_sum(sq)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        hjb_terminal(x)
    }
}

pub fn hjb_problem(params: &HjbParams) -> Result<FbsdeProblem> {
    if params.x0.len() != params.dim {
        return Err(Error::InvalidArgument(format!(
            "x0 has {} entries, dim is {}",
            params.x0.len(),
            params.dim
        )));
    }
    let dynamics = Hjb {
        sigma: params.sigma,
        horizon: params.horizon,
    };
    FbsdeProblem::new(
        "hjb",
        params.horizon,
        params.steps,
        params.x0.clone(),
        Arc::new(dynamics),
    )
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

type CacheKey = (u64, Vec<u64>, usize, u64, u64, u64);

fn mc_cache() -> &'static Mutex<HashMap<CacheKey, McEstimate>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, McEstimate>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// `u(t, x) = -ln E[exp(-g(x + sigma W_{T-t}))]` by Monte Carlo.
///
/// The standard error comes from the delta method,
/// `se(u) = se(mean) / mean`. Results are memoized per
/// `(t, x, samples, seed, sigma, T)`.
pub fn hjb_exact_mc(params: &HjbParams, t: f64, x: &[f64], samples: usize, seed: u64) -> Result<McEstimate> {
    if t > params.horizon {
        return Err(Error::InvalidArgument(format!(
            "t = {t} is beyond the horizon {}",
            params.horizon
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if x.len() != params.dim {
        return Err(Error::InvalidArgument(format!(
            "x has {} entries, dim is {}",
            x.len(),
            params.dim
        )));
    }
    if t == params.horizon {
        return Ok(McEstimate {
            value: hjb_terminal(x),
            std_error: 0.0,
        });
    }
    let key = (
        t.to_bits(),
        x.iter().map(|v| v.to_bits()).collect(),
        samples,
        seed,
        params.sigma.to_bits(),
        params.horizon.to_bits(),
    );
    if let Some(hit) = mc_cache().lock().expect("cache lock").get(&key) {
        return Ok(*hit);
    }
    let scale = params.sigma * (params.horizon - t).sqrt();
    let mut rng = GaussianRng::new(seed);
    let mut point = vec![0.0; x.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        for (p, xi) in point.iter_mut().zip(x) {
            *p = xi + scale * rng.normal();
        }
        let v = (-hjb_terminal(&point)).exp();
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = if samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    let est = McEstimate {
        value: -mean.ln(),
        std_error: (var / n).sqrt() / mean,
    };
    mc_cache().lock().expect("cache lock").insert(key, est);
    Ok(est)
}

/// `u` and `grad u` of the HJB solution at one point, by Monte Carlo with
/// the same normal draws for value and gradient:
/// `grad u = E[grad g(x + s xi) e^{-g}] / E[e^{-g}]`.
pub fn hjb_value_and_grad_mc(
    params: &HjbParams,
    t: f64,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> (f64, Vec<f64>) {
    let d = x.len();
    if t >= params.horizon {
        let sq: f64 = x.iter().map(|v| v * v).sum();
        return (hjb_terminal(x), x.iter().map(|v| 2.0 * v / (1.0 + sq)).collect());
    }
    let scale = params.sigma * (params.horizon - t).sqrt();
    let mut rng = GaussianRng::new(seed);
    let mut point = vec![0.0; d];
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for _ in 0..samples.max(1) {
        for (p, xi) in point.iter_mut().zip(x) {
            *p = xi + scale * rng.normal();
        }
        let sq: f64 = point.iter().map(|v| v * v).sum();
        let w = 2.0 / (1.0 + sq); // exp(-g)
        den += w;
        for (n, p) in num.iter_mut().zip(&point) {
            *n += w * 2.0 * p / (1.0 + sq);
        }
    }
    (
        -(den / samples.max(1) as f64).ln(),
        num.iter().map(|n| n / den).collect(),
    )
}

/// The true solution (closed form for BSB, Monte Carlo for HJB) scaled by
/// `scale`, usable anywhere a network is.
#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub id: ProblemId,
    pub scale: f64,
    /// Monte Carlo samples per point (HJB only).
    pub samples: usize,
    pub seed: u64,
}

impl ReferenceSolution {
    pub fn new(id: ProblemId) -> Self {
        ReferenceSolution {
            id,
            scale: 1.0,
            samples: 1_000,
            seed: REFERENCE_SEED,
        }
    }

    pub fn value_and_grad(&self, t: f64, x: &[f64]) -> (f64, Vec<f64>) {
        let (u, gx) = match &self.id {
            ProblemId::Bsb(p) => {
                let e = ((p.rate + p.sigma * p.sigma) * (p.horizon - t)).exp();
                (
                    e * x.iter().map(|v| v * v).sum::<f64>(),
                    x.iter().map(|v| 2.0 * e * v).collect(),
                )
            }
            ProblemId::Hjb(p) => hjb_value_and_grad_mc(p, t, x, self.samples, self.seed),
        };
        (self.scale * u, gx.into_iter().map(|v| self.scale * v).collect())
    }
}

impl SolutionModel for ReferenceSolution {
    fn eval(&self, g: &mut ExprGraph, t: Tensor, x: Tensor) -> Result<NetworkEval> {
        let (b, d) = (x.dims()[0], x.dims()[1]);
        let mut u = Vec::with_capacity(b);
        let mut gx = Vec::with_capacity(b * d);
        for (ti, row) in t.data().iter().zip(x.data().chunks(d)) {
            let (v, gr) = self.value_and_grad(*ti, row);
            u.push(v);
            gx.extend(gr);
        }
        let xv = g.constant(x);
        Ok(NetworkEval {
            u: g.constant(Tensor::from_vec(&[b, 1], u)?),
            grad_x: g.constant(Tensor::from_vec(&[b, d], gx)?),
            x: xv,
        })
    }
}

/// Path batches averaged for the convergence threshold.
pub const THRESHOLD_BATCHES: usize = 10;

/// Mean training loss of the reference solution scaled by `1 + accuracy`,
/// over `batches` path batches of size `batch_size`. This is the loss level
/// a run sits at when its solution is off by the given relative accuracy,
/// and serves as the convergence threshold.
pub fn accuracy_loss_level(
    id: &ProblemId,
    kind: LossKind,
    accuracy: f64,
    batch_size: usize,
    batches: usize,
) -> Result<f64> {
    if batches == 0 {
        return Err(Error::InvalidArgument("need at least one batch".into()));
    }
    let problem = id.build()?;
    let model = ReferenceSolution {
        scale: 1.0 + accuracy,
        ..ReferenceSolution::new(id.clone())
    };
    let losses = (0..batches)
        .into_par_iter()
        .map(|k| {
            let mut rng = GaussianRng::for_stream(REFERENCE_SEED, k as u64);
            let paths = PathBatch::sample_with(&problem, batch_size, &mut rng)?;
            let mut g = ExprGraph::new();
            let r = rollout(&problem, &model, &paths, &mut g)?;
            let l = loss(kind, &mut g, &r)?;
            Ok(g.value(l).item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / batches as f64)
}

/// Seed used for reference values reported by the harness and the CLI.
pub const REFERENCE_SEED: u64 = 20_240_101;

/// Named problem selection used by configuration and the CLI.
#[derive(Clone, Debug, PartialEq)]
pub enum ProblemId {
    Bsb(BsbParams),
    Hjb(HjbParams),
}

impl ProblemId {
    /// `bsb`, `hjb` (100-d) or `hjb<d>` such as `hjb10`.
    pub fn parse(name: &str) -> Result<Self> {
        let n = name.trim().to_ascii_lowercase();
        if n == "bsb" {
            return Ok(ProblemId::Bsb(BsbParams::default()));
        }
        if let Some(rest) = n.strip_prefix("hjb") {
            let dim = if rest.is_empty() {
                100
            } else {
                rest.trim_start_matches(['-', '_'])
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("unknown problem {name:?}")))?
            };
            if dim == 0 {
                return Err(Error::InvalidArgument("dimension must be positive".into()));
            }
            return Ok(ProblemId::Hjb(HjbParams::with_dim(dim)));
        }
        Err(Error::InvalidArgument(format!("unknown problem {name:?}")))
    }

    pub fn name(&self) -> String {
        match self {
            ProblemId::Bsb(_) => "bsb".into(),
            ProblemId::Hjb(p) if p.dim == 100 => "hjb".into(),
            ProblemId::Hjb(p) => format!("hjb{}", p.dim),
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        match &mut self {
            ProblemId::Bsb(p) => p.steps = steps,
            ProblemId::Hjb(p) => p.steps = steps,
        }
        self
    }

    pub fn build(&self) -> Result<FbsdeProblem> {
        let mut p = match self {
            ProblemId::Bsb(p) => bsb_problem(p)?,
            ProblemId::Hjb(p) => hjb_problem(p)?,
        };
        p.name = self.name();
        Ok(p)
    }

    /// `u(0, x0)`: closed form for BSB, Monte Carlo for HJB.
    pub fn reference_y0(&self) -> Result<McEstimate> {
        match self {
            ProblemId::Bsb(p) => {
                let b = Bsb {
                    sigma: p.sigma,
                    rate: p.rate,
                    horizon: p.horizon,
                };
                Ok(McEstimate {
                    value: b.exact_value(0.0, &p.x0),
                    std_error: 0.0,
                })
            }
            ProblemId::Hjb(p) => hjb_exact_mc(p, 0.0, &p.x0, p.mc_samples, REFERENCE_SEED),
        }
    }
}
