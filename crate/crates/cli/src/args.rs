use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand, ValueEnum};
use clipit_core::pipeline::{PairingConfig, TextConfig};
use clipit_core::synth::SynthConfig;
use clipit_core::train::{TrainConfig, Variant};

#[derive(Debug, Parser)]
#[command(name = "clipit", version, about = "Pseudo-pair images with reports, distill text into the image path, evaluate image-only")]
pub struct Cli {
    /// TOML config file; flags given on the command line override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory, created if absent
    #[arg(long, global = true, env = "CLIPIT_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,

    /// Worker threads for similarity search (results do not depend on it)
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark
    Synth(SynthArgs),
    /// Encode a report corpus into a text embedding store
    EncodeText(EncodeArgs),
    /// Match each image with a report in retrieval space
    Pair(PairArgs),
    /// Train a model on paired data and write its image-only checkpoint
    Train(TrainArgs),
    /// Predict classes with a checkpoint
    Infer(InferArgs),
    /// Score predictions against labels
    Eval(EvalArgs),
    /// Pair, encode, train, extract the image-only model and evaluate
    Pipeline(PipelineArgs),
}

/// True when `id` was given on the command line.
pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

macro_rules! apply {
    ($m:expr, $($id:literal => $dst:expr, $val:expr;)*) => {
        $(if explicit($m, $id) {
            $dst = $val;
        })*
    };
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthConfig::default().classes)]
    pub classes: usize,
    /// Training images
    #[arg(long, default_value_t = SynthConfig::default().samples)]
    pub samples: usize,
    #[arg(long, default_value_t = SynthConfig::default().test_samples)]
    pub test_samples: usize,
    #[arg(long, default_value_t = SynthConfig::default().reports)]
    pub reports: usize,
    #[arg(long, default_value_t = SynthConfig::default().retrieval_dim)]
    pub retrieval_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().vision_dim)]
    pub vision_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().text_dim)]
    pub text_dim: usize,
    /// Fraction of vision-ambiguous images
    #[arg(long, default_value_t = SynthConfig::default().ambiguous_fraction)]
    pub ambiguous: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise)]
    pub noise: f64,
    /// Keywords per class
    #[arg(long, default_value_t = SynthConfig::default().vocab_per_class)]
    pub vocab: usize,
    /// Subtype cue strength in task space
    #[arg(long, default_value_t = SynthConfig::default().cue)]
    pub cue: f64,
    #[arg(long, default_value_t = SynthConfig::default().cue_bits)]
    pub cue_bits: usize,
    #[arg(long, default_value_t = SynthConfig::default().organ)]
    pub organ: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn apply(&self, m: &ArgMatches, c: &mut SynthConfig) {
        apply!(m,
            "classes" => c.classes, self.classes;
            "samples" => c.samples, self.samples;
            "test_samples" => c.test_samples, self.test_samples;
            "reports" => c.reports, self.reports;
            "retrieval_dim" => c.retrieval_dim, self.retrieval_dim;
            "vision_dim" => c.vision_dim, self.vision_dim;
            "text_dim" => c.text_dim, self.text_dim;
            "ambiguous" => c.ambiguous_fraction, self.ambiguous;
            "noise" => c.noise, self.noise;
            "vocab" => c.vocab_per_class, self.vocab;
            "cue" => c.cue, self.cue;
            "cue_bits" => c.cue_bits, self.cue_bits;
            "organ" => c.organ, self.organ.clone();
            "seed" => c.seed, self.seed;
        );
    }
}

#[derive(Debug, Args)]
pub struct TextFlags {
    /// Hashed text embedding width
    #[arg(long, default_value_t = TextConfig::default().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = TextConfig::default().hash_seed)]
    pub hash_seed: u64,
    /// Word-dropout probability
    #[arg(long, default_value_t = TextConfig::default().dropout)]
    pub dropout: f64,
}

impl TextFlags {
    pub fn apply(&self, m: &ArgMatches, c: &mut TextConfig) {
        apply!(m,
            "dim" => c.dim, self.dim;
            "hash_seed" => c.hash_seed, self.hash_seed;
            "dropout" => c.dropout, self.dropout;
        );
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub text: TextFlags,
    /// Seed for word dropout
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "text_embeddings.cipe")]
    pub output: String,
}

#[derive(Debug, Args)]
pub struct PairFlags {
    /// Comma-separated report filter keywords
    #[arg(long, value_delimiter = ',')]
    pub keywords: Vec<String>,
    /// Match the k-th most similar report
    #[arg(long, default_value_t = PairingConfig::default().rank)]
    pub rank: usize,
    /// Match reports uniformly at random
    #[arg(long)]
    pub random: bool,
    /// Similarity histogram bins over [-1, 1]
    #[arg(long, default_value_t = PairingConfig::default().bins)]
    pub bins: usize,
}

impl PairFlags {
    pub fn apply(&self, m: &ArgMatches, c: &mut PairingConfig) {
        apply!(m,
            "keywords" => c.keywords, self.keywords.clone();
            "rank" => c.rank, self.rank;
            "random" => c.random, self.random;
            "bins" => c.bins, self.bins;
        );
    }
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Image retrieval embeddings
    #[arg(long)]
    pub images: PathBuf,
    /// Report retrieval embeddings with ids
    #[arg(long)]
    pub texts: PathBuf,
    /// Report corpus, needed with --keywords
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub pairing: PairFlags,
    /// Seed for random pairing
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// standard, no_lora, early_fusion, direct_distill or arch_only
    #[arg(long, default_value_t = Variant::Standard)]
    pub variant: Variant,
    /// Distillation weight
    #[arg(long, default_value_t = TrainConfig::default().lambda)]
    pub lambda: f64,
    #[arg(long, default_value_t = TrainConfig::default().lora_rank)]
    pub lora_r: usize,
    #[arg(long, default_value_t = TrainConfig::default().lora_alpha)]
    pub lora_alpha: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    /// Epochs per stage [default: 25, or 1 from 10000 samples]
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    /// Keep the text adapter and text head fixed in the multimodal stage
    #[arg(long)]
    pub freeze_text: bool,
}

impl TrainFlags {
    pub fn apply(&self, m: &ArgMatches, c: &mut TrainConfig) {
        apply!(m,
            "variant" => c.variant, self.variant;
            "lambda" => c.lambda, self.lambda;
            "lora_r" => c.lora_rank, self.lora_r;
            "lora_alpha" => c.lora_alpha, self.lora_alpha;
            "seed" => c.seed, self.seed;
            "epochs" => c.epochs, self.epochs;
            "batch" => c.batch_size, self.batch;
            "lr" => c.lr, self.lr;
            "weight_decay" => c.weight_decay, self.weight_decay;
            "freeze_text" => c.freeze_text, self.freeze_text;
        );
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labelled task-space image embeddings
    #[arg(long)]
    pub images: PathBuf,
    /// Pairing JSONL from `pair`
    #[arg(long)]
    pub pairs: PathBuf,
    /// Text embedding store from `encode-text`
    #[arg(long)]
    pub texts: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Branch {
    /// Images only, through the extracted model
    Unimodal,
    /// Text branch on each image's paired report (needs a full checkpoint)
    Text,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task-space image embeddings
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, value_enum, default_value_t = Branch::Unimodal)]
    pub branch: Branch,
    /// Text embedding store, for --branch text
    #[arg(long)]
    pub texts: Option<PathBuf>,
    /// Pairing JSONL, for --branch text
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value = "predictions.csv")]
    pub output: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions CSV; repeat for several runs
    #[arg(long, required = true)]
    pub predictions: Vec<PathBuf>,
    /// Embedding store carrying the labels
    #[arg(long)]
    pub labels: PathBuf,
    /// Text-branch predictions for Ω, against the first --predictions
    #[arg(long)]
    pub text_predictions: Option<PathBuf>,
    /// Comma-separated p-values to combine with Fisher's method
    #[arg(long, value_delimiter = ',')]
    pub p_values: Vec<f64>,
    /// Checkpoint whose parameter and FLOP counts to report
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "metrics.json")]
    pub output: String,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Directory with benchmark files; generated from the [synth] config when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub pairing: PairFlags,
    #[command(flatten)]
    pub text: TextFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Also train the image-only baseline and report Ω against it
    #[arg(long)]
    pub baseline: bool,
}
