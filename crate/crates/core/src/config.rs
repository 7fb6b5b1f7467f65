//! Experiment configuration: a nested TOML file whose every key can be
//! overridden by a flag named `--<section>-<key>` (or `--<key>` at top level),
//! underscores written as dashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{ExperimentPlan, MatchTolerance};
use crate::fbsde::LossKind;
use crate::nn::{ArchKind, InitScheme};
use crate::problems::ProblemId;
use crate::training::{AdamConfig, ConvergenceParams, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// `bsb`, `hjb` or `hjb<d>`.
    pub problem: String,
    pub epochs: usize,
    /// Number of seeds; runs use `seed_offset .. seed_offset + seeds`.
    pub seeds: usize,
    pub seed_offset: u64,
    /// Worker threads, 0 for one per core.
    pub threads: usize,
    /// Per-run CSV.
    pub output: PathBuf,
    /// Per-architecture summary CSV.
    pub summary: Option<PathBuf>,
    /// Per-epoch CSV; written only when set.
    pub full_series: Option<PathBuf>,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub convergence: ConvergenceSection,
    pub sweep: SweepSection,
    #[serde(rename = "match")]
    pub match_dnn: MatchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Architectures for `train`, e.g. `["tnn(16,4)", "dnn(6,35)"]`.
    pub archs: Vec<String>,
    pub activation: String,
    /// `glorot`, `matched` or `core-glorot`.
    pub init: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: String,
    pub steps: usize,
    pub resample_paths: bool,
    pub early_stop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub alpha: f64,
    pub window: usize,
    pub batch: usize,
    /// Fixed threshold; when absent it is the loss of the true solution
    /// perturbed by `accuracy`.
    pub threshold: Option<f64>,
    pub tol: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// TNN width for the bond sweep.
    pub width: usize,
    pub chis: Vec<usize>,
    /// TNN widths for the width sweep.
    pub widths: Vec<usize>,
    /// Bond dimension for the width sweep.
    pub chi: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSection {
    pub tnn: String,
    pub ladder: Vec<String>,
    pub epoch_tol: f64,
    pub accuracy_tol: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            problem: "bsb".into(),
            epochs: 3000,
            seeds: 10,
            seed_offset: 0,
            threads: 0,
            output: "runs.csv".into(),
            summary: None,
            full_series: None,
            network: NetworkSection::default(),
            train: TrainSection::default(),
            convergence: ConvergenceSection::default(),
            sweep: SweepSection::default(),
            match_dnn: MatchSection::default(),
        }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            archs: vec!["tnn(16,4)".into()],
            activation: "tanh".into(),
            init: "glorot".into(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSection {
            batch_size: 100,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            loss: "hybrid".into(),
            steps: 50,
            resample_paths: true,
            early_stop: false,
        }
    }
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        let c = ConvergenceParams::default();
        ConvergenceSection {
            alpha: c.alpha,
            window: c.window,
            batch: c.batch,
            threshold: None,
            tol: c.tol,
            accuracy: 0.01,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            width: 16,
            chis: vec![2, 4, 8, 16, 32],
            widths: vec![16, 64, 144, 256],
            chi: 2,
        }
    }
}

impl Default for MatchSection {
    fn default() -> Self {
        MatchSection {
            tnn: "tnn(16,4)".into(),
            ladder: [
                "dnn(16,16)",
                "dnn(16,24)",
                "dnn(16,32)",
                "dnn(16,40)",
                "dnn(16,48)",
                "dnn(16,64)",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            epoch_tol: MatchTolerance::default().epoch_rel,
            accuracy_tol: MatchTolerance::default().accuracy_abs,
        }
    }
}

fn parse_init(s: &str) -> Result<InitScheme> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "glorot" => Ok(InitScheme::Glorot),
        "matched" | "matched-magnitude" => Ok(InitScheme::MatchedMagnitude),
        "core-glorot" => Ok(InitScheme::CoreGlorot),
        other => Err(Error::InvalidArgument(format!("unknown init scheme {other:?}"))),
    }
}

pub fn parse_archs(items: &[String]) -> Result<Vec<ArchKind>> {
    items.iter().map(|s| s.parse()).collect()
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn problem_id(&self) -> Result<ProblemId> {
        Ok(ProblemId::parse(&self.problem)?.with_steps(self.train.steps))
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|s| self.seed_offset + s).collect()
    }

    pub fn match_tolerance(&self) -> MatchTolerance {
        MatchTolerance {
            epoch_rel: self.match_dnn.epoch_tol,
            accuracy_abs: self.match_dnn.accuracy_tol,
        }
    }

    /// Plan over `network.archs`; sweeps replace the architecture list.
    pub fn plan(&self) -> Result<ExperimentPlan> {
        let loss: LossKind = self.train.loss.parse()?;
        let archs = parse_archs(&self.network.archs)?;
        let mut plan = ExperimentPlan::new(self.problem_id()?, archs, self.seed_list());
        plan.train = TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.epochs,
            loss,
            seed: 0,
            resample_paths: self.train.resample_paths,
            adam: AdamConfig {
                lr: self.train.lr,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.eps,
            },
            stop_on_convergence: None,
        };
        plan.activation = self.network.activation.parse()?;
        plan.init = parse_init(&self.network.init)?;
        let c = &self.convergence;
        plan.convergence = ConvergenceParams {
            alpha: c.alpha,
            window: c.window,
            batch: c.batch,
            threshold: c.threshold.unwrap_or(1.0),
            tol: c.tol,
        };
        plan.auto_threshold = c.threshold.is_none();
        plan.accuracy = c.accuracy;
        plan.early_stop = self.train.early_stop;
        plan.keep_series = true;
        plan.threads = self.threads;
        Ok(plan)
    }
}

/// Command-line overrides, one per config key.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed_offset: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub full_series: Option<PathBuf>,
    /// Comma-separated, e.g. `tnn(16,4),dnn(6,35)`.
    #[arg(long, value_delimiter = ',')]
    pub network_archs: Option<Vec<String>>,
    #[arg(long)]
    pub network_activation: Option<String>,
    #[arg(long)]
    pub network_init: Option<String>,
    #[arg(long)]
    pub train_batch_size: Option<usize>,
    #[arg(long)]
    pub train_lr: Option<f64>,
    #[arg(long)]
    pub train_beta1: Option<f64>,
    #[arg(long)]
    pub train_beta2: Option<f64>,
    #[arg(long)]
    pub train_eps: Option<f64>,
    #[arg(long)]
    pub train_loss: Option<String>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub train_resample_paths: Option<bool>,
    #[arg(long)]
    pub train_early_stop: Option<bool>,
    #[arg(long)]
    pub convergence_alpha: Option<f64>,
    #[arg(long)]
    pub convergence_window: Option<usize>,
    #[arg(long)]
    pub convergence_batch: Option<usize>,
    #[arg(long)]
    pub convergence_threshold: Option<f64>,
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    #[arg(long)]
    pub convergence_accuracy: Option<f64>,
    #[arg(long)]
    pub sweep_width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_chis: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub sweep_chi: Option<usize>,
    #[arg(long)]
    pub match_tnn: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub match_ladder: Option<Vec<String>>,
    #[arg(long)]
    pub match_epoch_tol: Option<f64>,
    #[arg(long)]
    pub match_accuracy_tol: Option<f64>,
}

macro_rules! apply {
    ($src:expr, $($flag:ident => $dst:expr),* $(,)?) => {
        $(if let Some(v) = $src.$flag.clone() { $dst = v.into(); })*
    };
}

impl Overrides {
    pub fn apply(&self, c: &mut Config) {
        apply!(self,
            problem => c.problem,
            epochs => c.epochs,
            seeds => c.seeds,
            seed_offset => c.seed_offset,
            threads => c.threads,
            output => c.output,
            summary => c.summary,
            full_series => c.full_series,
            network_archs => c.network.archs,
            network_activation => c.network.activation,
            network_init => c.network.init,
            train_batch_size => c.train.batch_size,
            train_lr => c.train.lr,
            train_beta1 => c.train.beta1,
            train_beta2 => c.train.beta2,
            train_eps => c.train.eps,
            train_loss => c.train.loss,
            train_steps => c.train.steps,
            train_resample_paths => c.train.resample_paths,
            train_early_stop => c.train.early_stop,
            convergence_alpha => c.convergence.alpha,
            convergence_window => c.convergence.window,
            convergence_batch => c.convergence.batch,
            convergence_threshold => c.convergence.threshold,
            convergence_tol => c.convergence.tol,
            convergence_accuracy => c.convergence.accuracy,
            sweep_width => c.sweep.width,
            sweep_chis => c.sweep.chis,
            sweep_widths => c.sweep.widths,
            sweep_chi => c.sweep.chi,
            match_tnn => c.match_dnn.tnn,
            match_ladder => c.match_dnn.ladder,
            match_epoch_tol => c.match_dnn.epoch_tol,
            match_accuracy_tol => c.match_dnn.accuracy_tol,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(Config::from_toml("").unwrap(), c);
    }

    #[test]
    fn nested_keys_and_overrides() {
        let mut c = Config::from_toml(
            "problem = \"hjb10\"\nepochs = 5\n[convergence]\nwindow = 20\nthreshold = 0.5\n[match]\nladder = [\"dnn(16,48)\"]\n",
        )
        .unwrap();
        assert_eq!(c.convergence.window, 20);
        assert_eq!(c.match_dnn.ladder, vec!["dnn(16,48)".to_string()]);
        let o = Overrides {
            convergence_window: Some(30),
            train_lr: Some(0.01),
            ..Default::default()
        };
        o.apply(&mut c);
        assert_eq!(c.convergence.window, 30);
        assert_eq!(c.train.lr, 0.01);
        let plan = c.plan().unwrap();
        assert!(!plan.auto_threshold);
        assert_eq!(plan.convergence.threshold, 0.5);
        assert_eq!(plan.train.epochs, 5);
        assert!(Config::from_toml("bogus = 1").is_err());
    }
}
