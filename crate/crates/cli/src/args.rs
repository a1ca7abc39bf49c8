use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "jrl",
    version,
    about = "Sequential multi-attribute recognition with a recurrent encoder-decoder"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic correlated-attribute dataset directory
    GenData(GenDataArgs),
    /// Train one network under a single emission order
    Train(TrainArgs),
    /// Train the ten-order ensemble and write a manifest
    TrainEnsemble(EnsembleArgs),
    /// Decode attribute sets for the test split
    Predict(PredictArgs),
    /// Evaluate an ensemble manifest on the test split
    Evaluate(EvaluateArgs),
    /// Check every parameter gradient against central finite differences
    Gradcheck(GradcheckArgs),
    /// Run the component ablations or the training-size robustness protocol
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory (train.jsonl, test.jsonl, vocab.json)
    #[arg(long)]
    pub out: PathBuf,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from a named preset (acceptance, full)
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of attributes [default: 12]
    #[arg(long)]
    pub n_attr: Option<usize>,
    /// Regions per image [default: 6]
    #[arg(long)]
    pub m: Option<usize>,
    /// Region feature dimension, also the global feature dimension [default: 16]
    #[arg(long)]
    pub region_dim: Option<usize>,
    /// Training samples [default: 2000]
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Test samples [default: 500]
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Gaussian feature noise standard deviation [default: 0.3]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Correlation between neighbouring attributes, in [0, 1) [default: 0.8]
    #[arg(long)]
    pub correlation: Option<f64>,
    /// Attributes spanning every region [default: 2]
    #[arg(long)]
    pub n_global: Option<usize>,
    /// Lowest attribute base rate [default: 0.1]
    #[arg(long)]
    pub min_rate: Option<f64>,
    /// Highest attribute base rate [default: 0.5]
    #[arg(long)]
    pub max_rate: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct DataFlags {
    /// Dataset directory with train.jsonl, test.jsonl and vocab.json
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary sidecar overriding <DATA>/vocab.json
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    /// Start from a named preset (acceptance, full)
    #[arg(long)]
    pub preset: Option<String>,
    /// Hidden size of both LSTMs [default: 512; acceptance preset: 32]
    #[arg(long)]
    pub d: Option<usize>,
    /// Regions per image; must match the data [default: 6]
    #[arg(long)]
    pub m: Option<usize>,
    /// Attribute count; must match the data
    #[arg(long)]
    pub n_attr: Option<usize>,
    /// Attribute embedding width [default: min(d, 128); acceptance preset: 16]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Attention scorer width [default: d]
    #[arg(long)]
    pub attention_dim: Option<usize>,
    /// Exemplars fused into the decoder's initial state [default: 2]
    #[arg(long)]
    pub context_k: Option<usize>,
    /// Use the fixed context z at every decode step
    #[arg(long)]
    pub no_attention: bool,
    /// Disable exemplar context fusion (same as k = 0)
    #[arg(long)]
    pub no_context: bool,
    /// Replace the region encoder by a learned linear projection
    #[arg(long)]
    pub no_encoder: bool,
    /// Dropout rate before the prediction head [default: 0.5]
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training epochs [default: 50; acceptance preset: 20]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 32]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate [default: 0.0001; acceptance preset: 0.003]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Clip gradients to this global L2 norm [default: off; bare flag: 5]
    #[arg(long, num_args = 0..=1, default_missing_value = "5.0")]
    pub clip: Option<f64>,
    /// Epochs between exemplar context refreshes [default: 1]
    #[arg(long)]
    pub refresh_every: Option<usize>,
    /// Fraction of training data held out for validation loss [default: 0]
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Early-stopping patience in epochs (needs a validation split) [default: off]
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderChoice {
    RareFirst,
    FrequentFirst,
    TopDown,
    BottomUp,
    GlobalLocal,
    LocalGlobal,
    Random,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Checkpoint path; the loss log is written next to it with a .loss.csv suffix
    #[arg(long)]
    pub out: PathBuf,
    /// Attribute emission order
    #[arg(long, value_enum, default_value_t = OrderChoice::RareFirst)]
    pub order: OrderChoice,
    /// Seed of the permutation when --order random
    #[arg(long, default_value_t = 0)]
    pub order_seed: u64,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Output directory for member checkpoints, loss logs and manifest.json
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Single checkpoint to decode with
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub checkpoint: Option<PathBuf>,
    /// Ensemble manifest; predictions are the majority vote
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Predictions file (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-step attention weights over regions as CSV
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Ensemble manifest written by train-ensemble
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub manifest: Option<PathBuf>,
    /// Evaluate a single checkpoint instead of an ensemble
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report file (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Hidden size
    #[arg(long, default_value_t = 6)]
    pub d: usize,
    /// Regions per image
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    /// Attribute count
    #[arg(long, default_value_t = 5)]
    pub n_attr: usize,
    /// Region feature dimension
    #[arg(long, default_value_t = 4)]
    pub region_dim: usize,
    /// Attribute embedding width
    #[arg(long, default_value_t = 4)]
    pub embed_dim: usize,
    /// Attention scorer width
    #[arg(long, default_value_t = 4)]
    pub attention_dim: usize,
    /// Exemplar contexts (held constant)
    #[arg(long, default_value_t = 1)]
    pub context_k: usize,
    /// Check the model without attention
    #[arg(long)]
    pub no_attention: bool,
    /// Check the projection encoder variant
    #[arg(long)]
    pub no_encoder: bool,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Random seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Report file (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Ablation,
    Robustness,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Report file (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which battery to run
    #[arg(long, value_enum, default_value_t = Protocol::Ablation)]
    pub protocol: Protocol,
    /// Members per trained ensemble
    #[arg(long, default_value_t = 10)]
    pub ensemble_size: usize,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}
