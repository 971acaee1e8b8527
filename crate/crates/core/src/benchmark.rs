//! Loss/attention ablation grid and the desk-scale synthetic benchmark.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{gen_synthetic, make_split, Corpus, DataError, Exclusions, Modality, SemanticTable, SynthConfig, ZeroShotSplit};
use crate::encoder::{EncoderConfig, HeadConfig, Model};
use crate::metrics::EvalReport;
use crate::objectives::LossWeights;
use crate::trainer::{chance_baseline, evaluate_unseen, fit, FitOutcome, TrainConfig, TrainData, TrainError};

/// Which optional parts of the model are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub attention: bool,
    pub domain: bool,
    pub semantic: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        attention: false,
        domain: false,
        semantic: false,
    };
    pub const FULL: Ablation = Ablation {
        attention: true,
        domain: true,
        semantic: true,
    };

    /// Copies of `encoder` and `weights` with the disabled parts turned off.
    /// Disabled loss terms get weight zero; enabled ones keep theirs.
    pub fn apply(&self, encoder: &EncoderConfig, weights: &LossWeights) -> (EncoderConfig, LossWeights) {
        let mut e = encoder.clone();
        e.attention = self.attention;
        let mut w = *weights;
        if !self.domain {
            w.alpha_domain = 0.0;
        }
        if !self.semantic {
            w.alpha_semantic = 0.0;
        }
        (e, w)
    }

    /// Directory-friendly name such as `attn+dom`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.attention, "attn"), (self.domain, "dom"), (self.semantic, "sem")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

/// Modules added one at a time: triplet only, then attention, then each
/// auxiliary loss, then everything.
pub const ABLATION_GRID: [Ablation; 5] = [
    Ablation::BASELINE,
    Ablation {
        attention: true,
        domain: false,
        semantic: false,
    },
    Ablation {
        attention: true,
        domain: true,
        semantic: false,
    },
    Ablation {
        attention: true,
        domain: false,
        semantic: true,
    },
    Ablation::FULL,
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub setting: Ablation,
    pub report: EvalReport,
    pub best_unit: usize,
}

/// Trains one model per setting on the same data and seed and scores each
/// on the unseen classes. Row `i` writes its run files under
/// `run_dir/<i>-<label>` when a directory is given.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    data: TrainData<'_>,
    encoder: &EncoderConfig,
    heads: &HeadConfig,
    config: &TrainConfig,
    weights: &LossWeights,
    settings: &[Ablation],
    run_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(settings.len());
    for (i, setting) in settings.iter().enumerate() {
        let (enc, w) = setting.apply(encoder, weights);
        let model = Model::new(enc, heads.clone(), config.seed)?;
        let dir = run_dir.map(|d| d.join(format!("{i}-{}", setting.label())));
        let out = fit(model, data, config, &w, dir.as_deref())?;
        let report = evaluate_unseen(&out.model, &data, config.eval_k, config.embed_chunk)?;
        rows.push(AblationRow {
            setting: *setting,
            report,
            best_unit: out.best_unit,
        });
    }
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let k = rows.first().map_or(crate::metrics::DEFAULT_K, |r| r.report.k);
    let mut out = format!("attn\tdom\tsem\tmAP\tmAP@{k}\tP@{k}\n");
    let flag = |b: bool| if b { "1" } else { "0" };
    for r in rows {
        let s = r.setting;
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            flag(s.attention),
            flag(s.domain),
            flag(s.semantic),
            r.report.map_full,
            r.report.map_at_k,
            r.report.p_at_k
        )
        .unwrap();
    }
    out
}

/// Fixed settings of the synthetic benchmark: 20 shape classes with 6 held
/// out, a small shared-weight encoder and enough plain-SGD steps to train
/// it from scratch within a few minutes on one core.
pub mod synthetic {
    use super::*;

    pub const UNSEEN_CLASSES: usize = 6;
    pub const CHANNELS: [usize; 3] = [8, 16, 32];
    pub const EMBEDDING_DIM: usize = 64;
    pub const LR: f64 = 0.03;
    pub const MAX_UNITS: usize = 40;
    pub const STEPS_PER_UNIT: usize = 10;
    pub const EVAL_EVERY: usize = 4;

    pub fn corpus_config(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            ..SynthConfig::default()
        }
    }

    pub fn encoder_config() -> EncoderConfig {
        EncoderConfig {
            channels: CHANNELS.to_vec(),
            embedding_dim: EMBEDDING_DIM,
            share_weights: true,
            ..EncoderConfig::default()
        }
    }

    pub fn train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: LR,
            max_units: MAX_UNITS,
            steps_per_epoch: Some(STEPS_PER_UNIT),
            eval_every: EVAL_EVERY,
            // validation is noisy at this scale; keep the best unit instead
            patience: MAX_UNITS,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Corpus, semantics and split for one seed.
    pub fn dataset(seed: u64) -> Result<(Corpus, SemanticTable, ZeroShotSplit), DataError> {
        let (corpus, table) = gen_synthetic(&corpus_config(seed))?;
        let split = make_split(&corpus, UNSEEN_CLASSES, seed, &Exclusions::default())?;
        Ok((corpus, table, split))
    }

    #[derive(Clone, Debug)]
    pub struct BenchmarkRun {
        pub report: EvalReport,
        /// Expected mAP of a random ranking of the unseen gallery.
        pub chance: f64,
        pub fit: FitOutcome,
    }

    /// Generates the corpus for `seed`, trains one setting and scores it on
    /// the unseen classes.
    pub fn run(seed: u64, setting: Ablation, run_dir: Option<&Path>) -> Result<BenchmarkRun, TrainError> {
        let (corpus, table, split) = dataset(seed)?;
        let store = corpus.load_images()?;
        let data = TrainData {
            corpus: &corpus,
            store: &store,
            split: &split,
            semantics: &table,
        };
        let (enc, weights) = setting.apply(&encoder_config(), &LossWeights::default());
        let config = train_config(seed);
        let model = Model::new(enc, HeadConfig::default(), seed)?;
        let fit = fit(model, data, &config, &weights, run_dir)?;
        let report = evaluate_unseen(&fit.model, &data, config.eval_k, config.embed_chunk)?;
        let labels = |m: Modality| -> Vec<&str> {
            split
                .indices(m, true)
                .iter()
                .map(|&i| corpus.records(m)[i].class.as_str())
                .collect()
        };
        let chance = chance_baseline(&labels(Modality::Sketch), &labels(Modality::Photo));
        Ok(BenchmarkRun { report, chance, fit })
    }
}
