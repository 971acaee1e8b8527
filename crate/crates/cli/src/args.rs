use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use doodlerank::data::{Modality, SynthConfig, DEFAULT_TAU};
use doodlerank::encoder::{
    EncoderConfig, HeadConfig, DEFAULT_CHANNELS, DEFAULT_DOMAIN_HIDDEN, DEFAULT_EMBEDDING_DIM, DEFAULT_INPUT_SIZE,
    DEFAULT_SEMANTIC_DIM, DEFAULT_SEMANTIC_HIDDEN,
};
use doodlerank::metrics::DEFAULT_K;
use doodlerank::objectives::{LossWeights, DEFAULT_ALPHA, DEFAULT_LAMBDA_S, DEFAULT_MARGIN};
use doodlerank::trainer::{
    ScheduleUnit, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EMBED_CHUNK, DEFAULT_EVAL_EVERY, DEFAULT_LR,
    DEFAULT_MAX_UNITS, DEFAULT_PATIENCE, DEFAULT_VAL_FRACTION,
};

const SYNTH: SynthConfig = SynthConfig::DEFAULT;

/// Comma-separated list of positive widths, e.g. `16,32,64`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Widths)
    }
}

impl fmt::Display for Widths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl Widths {
    fn pair(&self, flag: &str) -> anyhow::Result<[usize; 2]> {
        match self.0[..] {
            [a, b] => Ok([a, b]),
            _ => anyhow::bail!("--{flag} takes exactly two widths, got {self}"),
        }
    }
}

/// Comma-separated class names; empty means none.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassList(pub Vec<String>);

impl FromStr for ClassList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(ClassList(
            s.split(',').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect(),
        ))
    }
}

impl fmt::Display for ClassList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}

#[derive(Parser, Debug)]
#[command(name = "doodlerank", version, about = "Zero-shot sketch-based image retrieval on CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic shape corpus with class word vectors.
    GenSynth(GenSynthArgs),
    /// Partition the classes of a manifest into seen and unseen.
    Split(SplitArgs),
    /// Train the encoders on seen classes.
    Train(TrainArgs),
    /// Embed photos or sketches into an index file.
    Embed(EmbedArgs),
    /// Rank a gallery index for every embedded query.
    Retrieve(RetrieveArgs),
    /// Score a rankings file.
    Eval(EvalArgs),
    /// Train and score the five-row module ablation.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// File of key=value lines applied before the command-line flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SYNTH.n_classes)]
    pub classes: usize,
    #[arg(long, default_value_t = SYNTH.sketches_per_class)]
    pub sketches_per_class: usize,
    #[arg(long, default_value_t = SYNTH.photos_per_class)]
    pub photos_per_class: usize,
    #[arg(long, default_value_t = SYNTH.image_size)]
    pub image_size: usize,
    #[arg(long, default_value_t = SYNTH.semantic_dim)]
    pub semantic_dim: usize,
    #[arg(long, default_value_t = SYNTH.seed)]
    pub seed: u64,
}

impl GenSynthArgs {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_classes: self.classes,
            sketches_per_class: self.sketches_per_class,
            photos_per_class: self.photos_per_class,
            image_size: self.image_size,
            semantic_dim: self.semantic_dim,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of unseen (test) classes.
    #[arg(long)]
    pub unseen: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classes that must stay seen, comma separated.
    #[arg(long, default_value_t = ClassList::default())]
    pub force_seen: ClassList,
    /// Classes that must be unseen, comma separated.
    #[arg(long, default_value_t = ClassList::default())]
    pub force_unseen: ClassList,
    #[arg(long, default_value = "split.tsv")]
    pub out: PathBuf,
}

/// Model, loss and optimizer settings shared by `train` and `ablate`.
#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    pub input_size: usize,
    /// Conv widths, one per block.
    #[arg(long, default_value_t = Widths(DEFAULT_CHANNELS.to_vec()))]
    pub channels: Widths,
    #[arg(long, default_value_t = DEFAULT_EMBEDDING_DIM)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub attention: bool,
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub share_weights: bool,
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub l2_normalize: bool,
    #[arg(long, default_value_t = Widths(DEFAULT_DOMAIN_HIDDEN.to_vec()))]
    pub domain_hidden: Widths,
    #[arg(long, default_value_t = Widths(DEFAULT_SEMANTIC_HIDDEN.to_vec()))]
    pub semantic_hidden: Widths,
    /// Word-vector dimension.
    #[arg(long, default_value_t = DEFAULT_SEMANTIC_DIM)]
    pub semantic_dim: usize,

    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha_triplet: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha_domain: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha_semantic: f64,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_S)]
    pub lambda_s: f64,

    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_UNITS)]
    pub max_units: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    /// epoch or iteration.
    #[arg(long, default_value_t = ScheduleUnit::Epoch)]
    pub schedule_unit: ScheduleUnit,
    /// Steps per epoch [default: one pass over the training sketches].
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_PATIENCE)]
    pub patience: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_EVERY)]
    pub eval_every: usize,
    /// Negative-class temperature; `inf` samples uniformly.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub eval_k: usize,
    #[arg(long, default_value_t = DEFAULT_EMBED_CHUNK)]
    pub embed_chunk: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ModelArgs {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: self.input_size,
            channels: self.channels.0.clone(),
            embedding_dim: self.embedding_dim,
            attention: self.attention,
            share_weights: self.share_weights,
            l2_normalize: self.l2_normalize,
        }
    }

    pub fn heads(&self) -> anyhow::Result<HeadConfig> {
        Ok(HeadConfig {
            domain_hidden: self.domain_hidden.pair("domain-hidden")?,
            semantic_hidden: self.semantic_hidden.pair("semantic-hidden")?,
            semantic_dim: self.semantic_dim,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha_triplet: self.alpha_triplet,
            alpha_domain: self.alpha_domain,
            alpha_semantic: self.alpha_semantic,
            margin: self.margin,
            lambda_s: self.lambda_s,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            max_units: self.max_units,
            batch_size: self.batch_size,
            schedule_unit: self.schedule_unit,
            patience: self.patience,
            eval_every: self.eval_every,
            seed: self.seed,
            tau: self.tau,
            val_fraction: self.val_fraction,
            steps_per_epoch: self.steps_per_epoch,
            eval_k: self.eval_k,
            embed_chunk: self.embed_chunk,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Word-vector text file.
    #[arg(long)]
    pub semantics: PathBuf,
    /// Receives train_log.tsv, best.ckpt, last.ckpt and config.txt.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Also write train_log.gp for plotting the log with gnuplot.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub gnuplot: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Partition {
    Unseen,
    Seen,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Photo,
    Sketch,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Photo => Modality::Photo,
            ModalityArg::Sketch => Modality::Sketch,
        }
    }
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Required unless --partition all.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModalityArg::Photo)]
    pub modality: ModalityArg,
    #[arg(long, value_enum, default_value_t = Partition::Unseen)]
    pub partition: Partition,
    #[arg(long, default_value_t = DEFAULT_EMBED_CHUNK)]
    pub chunk: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Gallery index (photo embeddings).
    #[arg(long)]
    pub index: PathBuf,
    /// Query index (sketch embeddings).
    #[arg(long)]
    pub queries: PathBuf,
    /// Results per query; 0 ranks the whole gallery.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    #[arg(long, default_value = "rankings.tsv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rankings: PathBuf,
    /// Gallery index the rankings were made against; supplies the number of
    /// relevant items per class.
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Write the report as TSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write one line per query here.
    #[arg(long)]
    pub per_query: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub semantics: PathBuf,
    #[arg(long, default_value = "ablation.tsv")]
    pub out: PathBuf,
    /// Keep each row's training run under this directory.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn defaults_match_library() {
        let cli = parse(&["d", "train", "--manifest", "m", "--split", "s", "--semantics", "v", "--run-dir", "r"]);
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.model.encoder(), EncoderConfig::default());
        assert_eq!(t.model.heads().unwrap(), HeadConfig::default());
        assert_eq!(t.model.weights(), LossWeights::default());
        assert_eq!(t.model.train(), TrainConfig::default());
        assert!(!t.gnuplot);

        let cli = parse(&["d", "gen-synth", "--out", "o"]);
        let Command::GenSynth(g) = cli.command else { panic!() };
        assert_eq!(g.synth_config(), SynthConfig::default());

        let cli = parse(&["d", "retrieve", "--index", "i", "--queries", "q"]);
        let Command::Retrieve(r) = cli.command else { panic!() };
        assert_eq!((r.k, r.shards), (DEFAULT_K, 1));
    }

    #[test]
    fn widths_round_trip() {
        let w: Widths = "8, 16,32".parse().unwrap();
        assert_eq!(w.0, vec![8, 16, 32]);
        assert_eq!(w.to_string(), "8,16,32");
        assert!("8,x".parse::<Widths>().is_err());
    }

    #[test]
    fn help_lists_every_default() {
        let mut cmd = Cli::command();
        let help = cmd.find_subcommand_mut("train").unwrap().render_long_help().to_string();
        for needle in ["[default: 0.0001]", "[default: 16,32,64]", "[default: 40]", "[default: epoch]", "[default: 0.1]"] {
            assert!(help.contains(needle), "{needle} missing from help");
        }
    }

    #[test]
    fn bool_flags_take_values() {
        let cli = parse(&[
            "d", "train", "--manifest", "m", "--split", "s", "--semantics", "v", "--run-dir", "r", "--attention", "false",
        ]);
        let Command::Train(t) = cli.command else { panic!() };
        assert!(!t.model.attention);
    }
}
