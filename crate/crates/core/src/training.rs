//! Adam, the training loop, and the smoothed-loss convergence test.

use std::time::Instant;

use crate::autodiff::ExprGraph;
use crate::error::{Error, Result};
use crate::fbsde::{loss, rollout, BoundNetwork, FbsdeProblem, LossKind, PathBatch};
use crate::nn::Network;
use crate::tensor::{GaussianRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Result<Self> {
        let zeros = |p: &&Tensor| {
            if p.shape().is_scalar() {
                Ok(Tensor::scalar(0.0))
            } else {
                Tensor::zeros(p.dims())
            }
        };
        Ok(AdamState {
            config,
            m: params.iter().map(zeros).collect::<Result<_>>()?,
            v: params.iter().map(zeros).collect::<Result<_>>()?,
            step: 0,
        })
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} moments, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, gr), m) in params.iter().zip(grads).zip(&self.m) {
            if p.dims() != gr.dims() || p.dims() != m.dims() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.dims().to_vec(),
                    rhs: gr.dims().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, gr), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = p.data_mut();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(gr.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Parameters of the windowed threshold-and-flatness convergence test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceParams {
    /// EMA coefficient in (0, 1); larger is smoother.
    pub alpha: f64,
    /// Window length in epochs.
    pub window: usize,
    /// Entries averaged at each end of the window.
    pub batch: usize,
    /// Every smoothed loss in the window must be below this.
    pub threshold: f64,
    /// Start-minus-end decrease across the window must be below this.
    pub tol: f64,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        ConvergenceParams {
            alpha: 0.9,
            window: 200,
            batch: 50,
            threshold: 1.0,
            tol: 1e-4,
        }
    }
}

impl ConvergenceParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.alpha < 1.0
            && self.window > 0
            && self.batch > 0
            && self.batch <= self.window
            && self.threshold > 0.0
            && self.tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "convergence parameters need 0 < alpha < 1, 0 < batch <= window and positive h, tol: {self:?}"
            )))
        }
    }
}

/// `s_1 = l_1`, `s_i = alpha s_{i-1} + (1 - alpha) l_i`.
pub fn ema_smooth(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("cannot smooth an empty series".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut s = series[0];
    out.push(s);
    for &l in &series[1..] {
        s = alpha * s + (1.0 - alpha) * l;
        out.push(s);
    }
    Ok(out)
}

/// Online form of the convergence test, fed one raw loss at a time.
///
/// Window starts are 1-based. After `n` losses have been pushed the window
/// starting at `i = n - w` (entries `i ..= i + w - 1`) is examined, which
/// reproduces the batch loop `for i in 1..=n-w` one step at a time.
#[derive(Clone, Debug)]
pub struct ConvergenceMonitor {
    params: ConvergenceParams,
    smoothed: Vec<f64>,
    found: Option<usize>,
}

impl ConvergenceMonitor {
    pub fn new(params: ConvergenceParams) -> Self {
        ConvergenceMonitor {
            params,
            smoothed: Vec::new(),
            found: None,
        }
    }

    pub fn converged_at(&self) -> Option<usize> {
        self.found
    }

    pub fn push(&mut self, loss: f64) -> Option<usize> {
        let s = match self.smoothed.last() {
            None => loss,
            Some(&prev) => self.params.alpha * prev + (1.0 - self.params.alpha) * loss,
        };
        self.smoothed.push(s);
        if self.found.is_some() {
            return self.found;
        }
        let (n, w, b) = (self.smoothed.len(), self.params.window, self.params.batch);
        if n > w {
            let start = n - w; // 1-based window start
            let win = &self.smoothed[start - 1..start - 1 + w];
            let head = win[..b].iter().sum::<f64>() / b as f64;
            let tail = win[w - b..].iter().sum::<f64>() / b as f64;
            let diff = head.abs() - tail.abs();
            if win.iter().all(|&v| v < self.params.threshold) && diff < self.params.tol {
                self.found = Some(start);
            }
        }
        self.found
    }
}

/// First 1-based epoch `i` whose window of smoothed losses lies entirely
/// below the threshold and has flattened out, or `None`.
pub fn convergence_epoch(series: &[f64], params: &ConvergenceParams) -> Option<usize> {
    let mut mon = ConvergenceMonitor::new(*params);
    for &l in series {
        if let Some(i) = mon.push(l) {
            return Some(i);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Draw fresh Brownian paths every epoch; otherwise reuse one batch.
    pub resample_paths: bool,
    pub adam: AdamConfig,
    /// Stop once this convergence test fires (plus the epochs it needed).
    pub stop_on_convergence: Option<ConvergenceParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            epochs: 3000,
            loss: LossKind::Hybrid,
            seed: 0,
            resample_paths: true,
            adam: AdamConfig::default(),
            stop_on_convergence: None,
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub loss: Vec<f64>,
    /// Network value `u(0, x0)` at the start of each epoch.
    pub y0: Vec<f64>,
    /// Seconds spent on each epoch.
    pub wall_time: Vec<f64>,
}

impl MetricsLog {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }
}

/// Paths used in `epoch` for a run seeded with `seed`.
pub fn epoch_paths(problem: &FbsdeProblem, config: &TrainConfig, epoch: usize) -> Result<PathBatch> {
    let stream = if config.resample_paths { epoch as u64 } else { 0 };
    let mut rng = GaussianRng::for_stream(config.seed, stream);
    PathBatch::sample_with(problem, config.batch_size, &mut rng)
}

/// Loss value and parameter gradients for one batch of paths.
pub fn loss_and_grads(
    problem: &FbsdeProblem,
    network: &Network,
    paths: &PathBatch,
    kind: LossKind,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut g = ExprGraph::new();
    let bound = BoundNetwork::bind(network, &mut g);
    let r = rollout(problem, &bound, paths, &mut g)?;
    let l = loss(kind, &mut g, &r)?;
    let y0 = r.y0(&g);
    let value = g.value(l).item();
    let grads = g.grad(l, &bound.params, false)?.into_values();
    Ok((value, y0, grads))
}

/// Train `network` in place. Each epoch samples a batch of paths (seeded
/// from `config.seed` and the epoch index), rolls out, and takes one Adam
/// step on the chosen loss.
pub fn train(problem: &FbsdeProblem, network: &mut Network, config: &TrainConfig) -> Result<MetricsLog> {
    if network.input_dim() != problem.dim + 1 {
        return Err(Error::InvalidArgument(format!(
            "network input width {} does not match state dimension {} + 1",
            network.input_dim(),
            problem.dim
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut adam = AdamState::new(&network.params(), config.adam)?;
    let mut monitor = config.stop_on_convergence.map(ConvergenceMonitor::new);
    let mut log = MetricsLog::default();
    let mut fixed = None;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let paths = match (&fixed, config.resample_paths) {
            (Some(p), false) => PathBatch::clone(p),
            _ => {
                let p = epoch_paths(problem, config, epoch)?;
                if !config.resample_paths {
                    fixed = Some(p.clone());
                }
                p
            }
        };
        let wrap = |e: Error| Error::TrainingDiverged {
            epoch,
            source: Box::new(e),
        };
        let (value, y0, grads) = loss_and_grads(problem, network, &paths, config.loss).map_err(wrap)?;
        if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(wrap(Error::InvalidArgument("non-finite loss or gradient".into())));
        }
        adam.update(&mut network.params_mut(), &grads)?;
        log.loss.push(value);
        log.y0.push(y0);
        log.wall_time.push(start.elapsed().as_secs_f64());
        if let Some(m) = monitor.as_mut() {
            if m.push(value).is_some() {
                break;
            }
        }
    }
    Ok(log)
}
