use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bundle::MatrixFormat;
use crate::error::{Error, Result};
use crate::explain::HomoDenominator;
use crate::mixture::{EmConfig, Init, WeightConfig};
use crate::sdm::{structure_variant, FitConfig, Variant, DEFAULT_DELTA, DEFAULT_PCA_DIM};

/// Error-slice discovery on exported classifier outputs.
#[derive(Debug, Parser)]
#[command(name = "slicekit", version, about, propagate_version = true)]
pub struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a slice model on a labeled validation bundle.
    Fit(FitCmd),
    /// Assign slices and flag error-prone points in a bundle.
    Infer(InferCmd),
    /// Score detected error-prone points against ground truth and baselines.
    Discover(DiscoverCmd),
    /// Feature-level explanations of error slices.
    #[command(subcommand)]
    Explain(ExplainCmd),
    /// Selective prediction, flipping and active learning.
    #[command(subcommand)]
    Improve(ImproveCmd),
    /// Synthetic bundles with known ground truth.
    #[command(subcommand)]
    Synth(SynthCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Edisa,
    Domino,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Kmeans,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    F32le,
    Csv,
}

impl From<FormatArg> for MatrixFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::F32le => MatrixFormat::F32le,
            FormatArg::Csv => MatrixFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HomoArg {
    Mispredicted,
    SliceSize,
}

impl From<HomoArg> for HomoDenominator {
    fn from(h: HomoArg) -> Self {
        match h {
            HomoArg::Mispredicted => HomoDenominator::Mispredicted,
            HomoArg::SliceSize => HomoDenominator::SliceSize,
        }
    }
}

/// Which weight defaults apply when a weight flag is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDefaults {
    Discover,
    Explain,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Exponent of the embedding term [default: 0.15; DOMINO mode 1]
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    /// Exponent of the error-distance term, or of the gold-label term in DOMINO mode
    /// [default: 0.1 for fit, discover and improve; 1 for explain; DOMINO mode 10]
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_e: Option<f64>,
    /// Exponent of the confidence term
    /// [default: 1 for fit, discover and improve; 0.1 for explain; DOMINO mode 40]
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_conf: Option<f64>,
    /// Number of slices.
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// PCA target dimension, clamped to the embedding dimension.
    #[arg(long, default_value_t = DEFAULT_PCA_DIM as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub pca_dim: u64,
    /// Use the raw embedding without PCA.
    #[arg(long)]
    pub no_pca: bool,
    /// Slices with validation accuracy below this are error slices.
    #[arg(long, default_value_t = DEFAULT_DELTA, allow_negative_numbers = true)]
    pub delta: f64,
    /// Mixture family.
    #[arg(long, value_enum, default_value_t = ModeArg::Edisa)]
    pub mode: ModeArg,
    /// Ablation variant replacing the default weights: edisa-Y, edisa-EY, edisa-Z or edisa-E.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// EM iteration cap.
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: u64,
    /// EM stops once the relative objective change falls below this.
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
    /// EM initialization.
    #[arg(long, value_enum, default_value_t = InitArg::Kmeans)]
    pub init: InitArg,
    /// Keep slice priors uniform instead of re-estimating them.
    #[arg(long)]
    pub freeze_prior: bool,
}

impl FitArgs {
    pub fn resolve(&self, defaults: WeightDefaults, seed: u64) -> Result<FitConfig> {
        let mut w = match (self.mode, defaults) {
            (ModeArg::Domino, _) => WeightConfig::domino(),
            (ModeArg::Edisa, WeightDefaults::Discover) => WeightConfig::discover(),
            (ModeArg::Edisa, WeightDefaults::Explain) => WeightConfig::explain(),
        };
        if let Some(v) = self.variant {
            if self.mode == ModeArg::Domino {
                return Err(Error::Config("--variant applies to edisa mode only".into()));
            }
            w = structure_variant(v);
        }
        if let Some(g) = self.gamma {
            w.gamma = g;
        }
        if let Some(e) = self.lambda_e {
            w.lambda_e = e;
        }
        if let Some(c) = self.lambda_conf {
            w.lambda_conf = c;
        }
        let cfg = FitConfig {
            weights: w,
            em: EmConfig {
                k: self.k as usize,
                max_iters: self.max_iters as usize,
                rel_tol: self.rel_tol,
                seed,
                init: match self.init {
                    InitArg::Kmeans => Init::KmeansPlusPlus,
                    InitArg::Random => Init::RandomResponsibility,
                },
                freeze_uniform_prior: self.freeze_prior,
            },
            delta: self.delta,
            pca_dim: (!self.no_pca).then_some(self.pca_dim as usize),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct FitCmd {
    /// Labeled bundle directory to fit on.
    #[arg(long)]
    pub train: PathBuf,
    /// Model JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional fit report JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct InferCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Bundle directory; labels are ignored when present.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Report JSON; a per-point CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiscoverCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Bundle directory holding a truth.json ground-truth sidecar.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ExplainCmd {
    /// Permutation tests of every (error slice, feature) pair.
    Significance(SignificanceCmd),
    /// Synthetic feature-detection task for each feature.
    Synthetic(SyntheticCmd),
}

#[derive(Debug, Args)]
pub struct SignificanceCmd {
    /// Model fitted on `--bundle`; omitted or with `--refit`, a model is fitted with Explain weights.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Refit on the bundle even when a model is given.
    #[arg(long)]
    pub refit: bool,
    /// Labeled bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Feature table JSONL [default: <bundle>/features.jsonl]
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Permutations per test.
    #[arg(long, default_value_t = 1000)]
    pub n_perm: usize,
    /// Denominator of the Homo rate.
    #[arg(long, value_enum, default_value_t = HomoArg::Mispredicted)]
    pub homo_denominator: HomoArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct SyntheticCmd {
    /// Labeled bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Feature table JSONL [default: <bundle>/features.jsonl]
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Features to test; repeatable [default: every feature in the table]
    #[arg(long = "feature")]
    pub feature_names: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Subcommand)]
pub enum ImproveCmd {
    /// Reject points by descending error probability and track retained accuracy.
    Selective(SelectiveCmd),
    /// Flip predictions of error-prone points and track accuracy.
    Flip(FlipCmd),
    /// Active-learning loop driving an external trainer.
    Active(ActiveCmd),
}

#[derive(Debug, Args)]
pub struct SelectiveCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Bundle directory holding a truth.json ground-truth sidecar.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlipCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Bundle directory holding a truth.json ground-truth sidecar.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Labeled validation bundle the model was fitted on.
    #[arg(long)]
    pub validation: PathBuf,
    /// Multi-class confidence threshold; chosen on a validation hold-out when absent.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Candidate thresholds for validation.
    #[arg(long, value_delimiter = ',', default_values_t = crate::improve::DEFAULT_THRESHOLD_GRID)]
    pub grid: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Sdm,
    Random,
    Confidence,
}

#[derive(Debug, Args)]
pub struct ActiveCmd {
    /// Training bundle directory; only its ids are read.
    #[arg(long)]
    pub train: PathBuf,
    /// Trainer config JSON with `command` and `timeout_secs`.
    #[arg(long, required_unless_present = "trainer_cmd")]
    pub trainer_config: Option<PathBuf>,
    /// Trainer command after `--`; the request path is appended as its last argument.
    #[arg(last = true, value_name = "TRAINER_CMD", conflicts_with = "trainer_config")]
    pub trainer_cmd: Vec<String>,
    /// Per-round trainer timeout in seconds for a command given after `--`.
    #[arg(long, default_value_t = 600)]
    pub timeout_secs: u64,
    /// Fraction of the training ids used as the seed set.
    #[arg(long, default_value_t = 0.01)]
    pub seed_frac: f64,
    /// Maximum number of labeled training points.
    #[arg(long)]
    pub budget: usize,
    #[arg(long, value_enum, default_value_t = SelectionArg::Sdm)]
    pub selection: SelectionArg,
    /// Points added per round by random and confidence selection.
    #[arg(long, default_value_t = 500)]
    pub per_step: usize,
    /// Cap on points added per round by any selection.
    #[arg(long)]
    pub max_per_round: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub max_rounds: usize,
    /// Directory for per-round requests and bundles.
    #[arg(long)]
    pub workdir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Subcommand)]
pub enum SynthCmd {
    /// Planted Gaussian clusters with chosen error clusters.
    Planted(PlantedCmd),
    /// Classifier scenario with a built-in trainer.
    Scenario(ScenarioCmd),
    /// Serve one trainer request for a written scenario.
    Train(TrainCmd),
}

#[derive(Debug, Args)]
pub struct PlantedCmd {
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k_true: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub cluster_size: usize,
    /// Clusters whose points are mostly mispredicted.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2])]
    pub error_clusters: Vec<usize>,
    /// Distance between cluster means in units of sigma.
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.9)]
    pub error_rate: f64,
    #[arg(long, value_enum, default_value_t = FormatArg::F32le)]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    /// Label-noise hard regions.
    Default,
    /// Learnable hard regions that are rare in the training split.
    ActiveLearning,
}

#[derive(Debug, Args)]
pub struct ScenarioCmd {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = PresetArg::Default)]
    pub preset: PresetArg,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Validation size [default: twice the test size]
    #[arg(long)]
    pub validation_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Timeout written into the trainer config.
    #[arg(long, default_value_t = 600)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Scenario directory written by `synth scenario`.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Trainer request JSON.
    pub request: PathBuf,
}
