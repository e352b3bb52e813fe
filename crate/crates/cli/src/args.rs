use std::path::PathBuf;
use std::str::FromStr;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use mqner_core::dataops::{Grouping, Heuristics, Preset};
use mqner_core::{HeadKind, InteractionKind, Mode};

fn choice<T>(names: &'static [&'static str]) -> impl TypedValueParser<Value = T>
where
    T: FromStr + Clone + Send + Sync + 'static,
    T::Err: std::fmt::Debug,
{
    PossibleValuesParser::new(names).map(|s| s.parse::<T>().expect("listed names parse"))
}

pub const MODES: &[&str] = &["mqmrc", "sqmrc"];
pub const HEADS: &[&str] = &["bio", "span"];
pub const OPS: &[&str] = &[
    "layer_sum",
    "difference",
    "layer_product_relu",
    "layer_product_tanh",
    "max",
    "product",
    "layer_product",
];
pub const PRESETS: &[&str] = &["retail", "k3"];
pub const GROUPINGS: &[&str] = &["text", "consecutive"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Switch {
    On,
    Off,
}

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "on" => Ok(Switch::On),
            "off" => Ok(Switch::Off),
            _ => Err(format!("expected on or off, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("expected table or json, got `{s}`")),
        }
    }
}

/// Multi-question reading-comprehension NER toolkit.
#[derive(Debug, Parser)]
#[command(name = "mqner", version)]
pub struct Cli {
    /// key=value file supplying defaults for any flag (flags win).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated corpus.
    Synth(SynthArgs),
    /// Convert between single-question and multi-question files.
    Transform(TransformArgs),
    /// Entities-per-text histogram of a corpus.
    Stats(StatsArgs),
    /// Annotate raw texts by gazetteer matching.
    Tag(TagArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Score a model or a predictions file against gold annotations.
    Eval(EvalArgs),
    /// Compare encoder passes and wall clock of both formulations.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = choice::<Preset>(PRESETS))]
    pub preset: Option<Preset>,
    /// Number of texts to generate.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output file layout.
    #[arg(long, value_parser = choice::<Mode>(MODES))]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Target layout.
    #[arg(long, value_parser = choice::<Mode>(MODES))]
    pub to: Option<Mode>,
    /// How single-question rows are grouped into texts.
    #[arg(long, value_parser = choice::<Grouping>(GROUPINGS))]
    pub grouping: Option<Grouping>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Layout of the input file.
    #[arg(long, value_parser = choice::<Mode>(MODES))]
    pub mode: Option<Mode>,
    #[arg(long, value_parser = choice::<Grouping>(GROUPINGS))]
    pub grouping: Option<Grouping>,
    #[arg(long, value_parser = choice::<ReportFormat>(&["table", "json"]))]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct TagArgs {
    /// Plain text, one text per line.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Multi-question output file.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// attribute<TAB>value<TAB>count frequencies.
    #[arg(long, value_name = "PATH", conflicts_with = "labelled")]
    pub gazetteer: Option<PathBuf>,
    /// Annotated multi-question corpus to count values from.
    #[arg(long, value_name = "PATH")]
    pub labelled: Option<PathBuf>,
    /// Where to write the cut gazetteer.
    #[arg(long, value_name = "PATH")]
    pub gazetteer_out: Option<PathBuf>,
    /// none, all, or a comma list of lowercase,plural,irregular.
    #[arg(long)]
    pub heuristics: Option<Heuristics>,
}

/// Model and optimisation settings shared by train and bench.
#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    #[arg(long, value_parser = choice::<Mode>(MODES))]
    pub mode: Option<Mode>,
    #[arg(long, value_parser = choice::<HeadKind>(HEADS))]
    pub head: Option<HeadKind>,
    #[arg(long, value_parser = choice::<InteractionKind>(OPS))]
    pub op: Option<InteractionKind>,
    #[arg(long, value_parser = choice::<Switch>(&["on", "off"]))]
    pub shuffle_entities: Option<Switch>,
    #[arg(long)]
    pub no_answer_rate: Option<f64>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub query_map: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub attention_heads: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Multi-question training corpus.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Multi-question dev corpus used for model selection.
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold multi-question corpus.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Checkpoint directory to predict with.
    #[arg(long, value_name = "PATH", conflicts_with = "predictions")]
    pub model: Option<PathBuf>,
    /// Predictions file to score instead of running a model.
    #[arg(long, value_name = "PATH")]
    pub predictions: Option<PathBuf>,
    /// Where to write the model's predictions.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[arg(long, value_parser = choice::<ReportFormat>(&["table", "json"]))]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Multi-question corpus; a synthetic one is generated when absent.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_parser = choice::<Preset>(PRESETS))]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Where to write the JSON report.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}
