//! Forward-backward SDE systems, Brownian sampling, the Euler-Maruyama
//! rollout, and the pathwise training losses.
//!
//! The forward state `X` is treated as data: it is simulated on plain
//! tensors and enters the expression graph as constants. `Y = u(t, X)` and
//! `Z = grad_x u(t, X)` are graph nodes, so the residuals of the discretized
//! backward equation are differentiable in the network parameters.
//!
//! All `M (N + 1)` evaluation points of a batch go through the network as a
//! single batch with rows ordered time-major (`row = n * M + m`).

use std::fmt;
use std::sync::Arc;

use crate::autodiff::{ExprGraph, VarRef};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkEval};
use crate::tensor::{GaussianRng, Tensor};

/// Coefficients of
/// `dX = mu(t, X, Y, Z) dt + sigma(t, X, Y) dW`,
/// `dY = phi(t, X, Y, Z) dt + Z^T sigma(t, X, Y) dW`, `Y_T = g(X_T)`.
pub trait Dynamics: Send + Sync {
    /// `out = mu(t, x, y, z)`.
    fn drift(&self, t: f64, x: &[f64], y: f64, z: &[f64], out: &mut [f64]);

    /// `out = sigma(t, x, y) dw`.
    fn diffusion(&self, t: f64, x: &[f64], y: f64, dw: &[f64], out: &mut [f64]);

    /// `phi(t, x, y, z)` on plain numbers.
    fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64;

    /// `phi` on a batch: `x` is `rows x d` data, `y` a `rows x 1` node and
    /// `z` a `rows x d` node. Returns a `rows x 1` node.
    fn driver_graph(&self, g: &mut ExprGraph, t: &[f64], x: &Tensor, y: VarRef, z: VarRef) -> Result<VarRef>;

    /// Terminal condition `g(x)`.
    fn terminal(&self, x: &[f64]) -> f64;

    /// Closed-form solution, when one exists.
    fn exact(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Whether `mu` or `sigma` read `y` or `z`. When false the forward state
    /// is simulated without consulting the network.
    fn forward_uses_solution(&self) -> bool {
        false
    }
}

#[derive(Clone)]
pub struct FbsdeProblem {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub steps: usize,
    pub x0: Vec<f64>,
    pub dynamics: Arc<dyn Dynamics>,
}

impl fmt::Debug for FbsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FbsdeProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("steps", &self.steps)
            .finish_non_exhaustive()
    }
}

impl FbsdeProblem {
    pub fn new(
        name: impl Into<String>,
        horizon: f64,
        steps: usize,
        x0: Vec<f64>,
        dynamics: Arc<dyn Dynamics>,
    ) -> Result<Self> {
        if horizon.is_nan() || horizon <= 0.0 || steps == 0 || x0.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "need T > 0, N >= 1 and d >= 1 (got T={horizon}, N={steps}, d={})",
                x0.len()
            )));
        }
        Ok(FbsdeProblem {
            name: name.into(),
            dim: x0.len(),
            horizon,
            steps,
            x0,
            dynamics,
        })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        self.horizon * n as f64 / self.steps as f64
    }

    pub fn t_grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }

    pub fn exact(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.dynamics.exact(t, x)
    }
}

/// Brownian increments for `M` paths over `N` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    /// `M x N x d`, entries `~ N(0, dt)`.
    pub dw: Tensor,
    pub t_grid: Vec<f64>,
    pub batch: usize,
}

impl PathBatch {
    pub fn sample(problem: &FbsdeProblem, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = GaussianRng::new(seed);
        Self::sample_with(problem, batch, &mut rng)
    }

    pub fn sample_with(problem: &FbsdeProblem, batch: usize, rng: &mut GaussianRng) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let dw = Tensor::randn_with(
            &[batch, problem.steps, problem.dim],
            0.0,
            problem.dt().sqrt(),
            rng,
        )?;
        Ok(PathBatch {
            dw,
            t_grid: problem.t_grid(),
            batch,
        })
    }

    /// Use caller-provided increments (`M x N x d`).
    pub fn from_increments(problem: &FbsdeProblem, dw: Tensor) -> Result<Self> {
        let dims = dw.dims();
        if dims.len() != 3 || dims[1] != problem.steps || dims[2] != problem.dim {
            return Err(Error::ShapeMismatch {
                op: "path batch",
                lhs: dims.to_vec(),
                rhs: vec![0, problem.steps, problem.dim],
            });
        }
        Ok(PathBatch {
            batch: dims[0],
            dw,
            t_grid: problem.t_grid(),
        })
    }

    pub fn increment(&self, m: usize, n: usize) -> &[f64] {
        let (steps, d) = (self.dw.dims()[1], self.dw.dims()[2]);
        let off = (m * steps + n) * d;
        &self.dw.data()[off..off + d]
    }
}

/// Anything that yields `u` and `grad_x u` as graph nodes for a batch of
/// `(t, x)` points. A [`Network`] with bound parameters is the usual one.
pub trait SolutionModel {
    fn eval(&self, g: &mut ExprGraph, t: Tensor, x: Tensor) -> Result<NetworkEval>;
}

/// A network whose parameters live in a particular graph.
pub struct BoundNetwork<'a> {
    pub network: &'a Network,
    pub params: Vec<VarRef>,
}

impl<'a> BoundNetwork<'a> {
    pub fn bind(network: &'a Network, g: &mut ExprGraph) -> Self {
        BoundNetwork {
            network,
            params: network.bind(g),
        }
    }
}

impl SolutionModel for BoundNetwork<'_> {
    fn eval(&self, g: &mut ExprGraph, t: Tensor, x: Tensor) -> Result<NetworkEval> {
        self.network.eval(g, &self.params, t, x)
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Forward states, `M x (N+1) x d`.
    pub x: Tensor,
    /// `u(t_n, X_n)`, node of shape `(N+1) x M`.
    pub y: VarRef,
    /// `grad_x u(t_n, X_n)`, node of shape `(N+1) M x d`, rows time-major.
    pub z: VarRef,
    /// Discretized backward-equation residuals, node of shape `N x M`.
    pub residuals: VarRef,
    /// `Y_N` for every path, node of shape `1 x M`.
    pub y_terminal: VarRef,
    /// `g(X_N)` for every path, `1 x M`.
    pub g_terminal: Tensor,
}

impl Rollout {
    pub fn batch(&self) -> usize {
        self.x.dims()[0]
    }

    pub fn steps(&self) -> usize {
        self.x.dims()[1] - 1
    }

    pub fn state(&self, m: usize, n: usize) -> &[f64] {
        let (np1, d) = (self.x.dims()[1], self.x.dims()[2]);
        let off = (m * np1 + n) * d;
        &self.x.data()[off..off + d]
    }

    /// `u(0, X_0)` averaged over paths; all paths share `X_0` so this is the
    /// network's value at the initial state.
    pub fn y0(&self, g: &ExprGraph) -> f64 {
        let y = g.value(self.y);
        let m = y.dims()[1];
        y.data()[..m].iter().sum::<f64>() / m as f64
    }
}

fn time_major_inputs(x: &Tensor, problem: &FbsdeProblem, upto: usize) -> Result<(Tensor, Tensor)> {
    let (batch, np1, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let rows = upto * batch;
    let mut t = Vec::with_capacity(rows);
    let mut xs = Vec::with_capacity(rows * d);
    for n in 0..upto {
        for m in 0..batch {
            t.push(problem.time(n));
            let off = (m * np1 + n) * d;
            xs.extend_from_slice(&x.data()[off..off + d]);
        }
    }
    Ok((
        Tensor::from_vec(&[rows, 1], t)?,
        Tensor::from_vec(&[rows, d], xs)?,
    ))
}

/// Euler-Maruyama rollout of the forward state followed by the
/// backward-equation residuals
/// `Y_{n+1} - Y_n - phi_n dt - Z_n^T sigma_n dW_n`.
///
/// `sigma` in the residual is evaluated at the current value of `Y_n` and is
/// treated as data (not differentiated).
pub fn rollout(
    problem: &FbsdeProblem,
    model: &dyn SolutionModel,
    paths: &PathBatch,
    g: &mut ExprGraph,
) -> Result<Rollout> {
    let (batch, steps, d) = (paths.batch, problem.steps, problem.dim);
    if paths.dw.dims() != [batch, steps, d] {
        return Err(Error::ShapeMismatch {
            op: "rollout paths",
            lhs: paths.dw.dims().to_vec(),
            rhs: vec![batch, steps, d],
        });
    }
    let dt = problem.dt();
    let dyn_ = &problem.dynamics;
    let np1 = steps + 1;

    let mut x = Tensor::zeros(&[batch, np1, d])?;
    for m in 0..batch {
        x.data_mut()[m * np1 * d..m * np1 * d + d].copy_from_slice(&problem.x0);
    }
    let mut drift = vec![0.0; d];
    let mut diff = vec![0.0; d];
    let zeros = vec![0.0; d];
    for n in 0..steps {
        let t = problem.time(n);
        // Solution values at step n, only needed for coupled dynamics.
        let (yv, zv) = if dyn_.forward_uses_solution() {
            let (tt, xx) = time_major_inputs(&x, problem, n + 1)?;
            let rows = tt.len();
            let t_n = Tensor::from_vec(&[batch, 1], tt.data()[rows - batch..].to_vec())?;
            let x_n = Tensor::from_vec(&[batch, d], xx.data()[(rows - batch) * d..].to_vec())?;
            let ev = model.eval(g, t_n, x_n)?;
            (
                g.value(ev.u).clone().into_data(),
                g.value(ev.grad_x).clone().into_data(),
            )
        } else {
            (vec![0.0; batch], vec![0.0; batch * d])
        };
        for m in 0..batch {
            let cur = (m * np1 + n) * d;
            // X_n and X_{n+1} are adjacent in the path-major layout.
            let (xn, xnext) = x.data_mut()[cur..cur + 2 * d].split_at_mut(d);
            let z = if dyn_.forward_uses_solution() {
                &zv[m * d..(m + 1) * d]
            } else {
                &zeros[..]
            };
            dyn_.drift(t, xn, yv[m], z, &mut drift);
            dyn_.diffusion(t, xn, yv[m], paths.increment(m, n), &mut diff);
            for k in 0..d {
                xnext[k] = xn[k] + drift[k] * dt + diff[k];
            }
        }
        let finite = (0..batch).all(|m| {
            let off = (m * np1 + n + 1) * d;
            x.data()[off..off + d].iter().all(|v| v.is_finite())
        });
        if !finite {
            return Err(Error::DivergedRollout { step: n + 1 });
        }
    }

    let (t_in, x_in) = time_major_inputs(&x, problem, np1)?;
    let t_rows: Vec<f64> = t_in.data().to_vec();
    let x_rows = x_in.clone();
    let ev = model.eval(g, t_in, x_in)?;
    let rows = np1 * batch;
    let y = g.reshape(ev.u, &[np1, batch])?;

    // sigma_n dW_n per row; zero on the terminal time slice.
    let y_vals = g.value(ev.u).clone();
    let mut coeff = Tensor::zeros(&[rows, d])?;
    for n in 0..steps {
        for m in 0..batch {
            let r = n * batch + m;
            let xn = &x_rows.data()[r * d..(r + 1) * d];
            let (t, yv) = (t_rows[r], y_vals.data()[r]);
            dyn_.diffusion(t, xn, yv, paths.increment(m, n), &mut diff);
            coeff.data_mut()[r * d..(r + 1) * d].copy_from_slice(&diff);
        }
    }
    let coeff = g.constant(coeff);
    let z_noise = g.mul(ev.grad_x, coeff)?;
    let z_noise = g.row_sum(z_noise)?;
    let phi = dyn_.driver_graph(g, &t_rows, &x_rows, ev.u, ev.grad_x)?;
    let phi_dt = g.scale(phi, dt)?;
    let increment = g.add(phi_dt, z_noise)?;
    let increment = g.reshape(increment, &[np1, batch])?;

    let mut diff_op = Tensor::zeros(&[steps, np1])?;
    let mut take_op = Tensor::zeros(&[steps, np1])?;
    for n in 0..steps {
        diff_op.data_mut()[n * np1 + n] = -1.0;
        diff_op.data_mut()[n * np1 + n + 1] = 1.0;
        take_op.data_mut()[n * np1 + n] = 1.0;
    }
    let diff_op = g.constant(diff_op);
    let take_op = g.constant(take_op);
    let dy = g.matmul(diff_op, y)?;
    let predicted = g.matmul(take_op, increment)?;
    let residuals = g.sub(dy, predicted)?;

    let mut last = Tensor::zeros(&[1, np1])?;
    last.data_mut()[steps] = 1.0;
    let last = g.constant(last);
    let y_terminal = g.matmul(last, y)?;
    let g_terminal: Vec<f64> = (0..batch)
        .map(|m| {
            let off = (m * np1 + steps) * d;
            dyn_.terminal(&x.data()[off..off + d])
        })
        .collect();

    Ok(Rollout {
        x,
        y,
        z: ev.grad_x,
        residuals,
        y_terminal,
        g_terminal: Tensor::from_vec(&[1, batch], g_terminal)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum LossKind {
    /// Squared residuals plus mean log-cosh of the terminal mismatch.
    #[default]
    Hybrid,
    /// Squared residuals plus summed squared terminal mismatch.
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hybrid" | "logcosh" | "log_cosh" => Ok(LossKind::Hybrid),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::InvalidArgument(format!("unknown loss {other:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Hybrid => "hybrid",
            LossKind::Mse => "mse",
        })
    }
}

fn pathwise_term(g: &mut ExprGraph, r: &Rollout) -> Result<VarRef> {
    let sq = g.square(r.residuals)?;
    g.sum(sq)
}

/// `sum_m sum_n residual^2 + (1/M) sum_m ln cosh(Y_N - g(X_N))`.
pub fn loss_hybrid(g: &mut ExprGraph, r: &Rollout) -> Result<VarRef> {
    let path = pathwise_term(g, r)?;
    let target = g.constant(r.g_terminal.clone());
    let gap = g.sub(r.y_terminal, target)?;
    let lc = g.ln_cosh(gap)?;
    let term = g.mean(lc)?;
    g.add(path, term)
}

/// `sum_m sum_n residual^2 + sum_m (Y_N - g(X_N))^2`.
pub fn loss_mse(g: &mut ExprGraph, r: &Rollout) -> Result<VarRef> {
    let path = pathwise_term(g, r)?;
    let target = g.constant(r.g_terminal.clone());
    let gap = g.sub(r.y_terminal, target)?;
    let term = g.norm_sq(gap)?;
    g.add(path, term)
}

pub fn loss(kind: LossKind, g: &mut ExprGraph, r: &Rollout) -> Result<VarRef> {
    match kind {
        LossKind::Hybrid => loss_hybrid(g, r),
        LossKind::Mse => loss_mse(g, r),
    }
}
