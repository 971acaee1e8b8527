//! SGD training loop with the domain-reversal warm-up schedule, validation
//! on a held-out slice of seen-class data, early stopping and checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, Real};
use crate::data::{Corpus, DataError, ImageStore, Modality, SemanticTable, TripletBatch, TripletSampler, ZeroShotSplit, DEFAULT_TAU};
use crate::encoder::{save_checkpoint, Branch, EncoderError, Model};
use crate::imaging::Image;
use crate::metrics::{self, MetricsError, DEFAULT_K};
use crate::objectives::{domain_loss, semantic_loss, semantics_tensor, triplet_loss, LossError, LossWeights, TripletEmbeddings};
use crate::retrieval::{self, GalleryIndex, RetrievalError};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_MAX_UNITS: usize = 40;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_PATIENCE: usize = 5;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;
pub const DEFAULT_EVAL_EVERY: usize = 1;
pub const DEFAULT_EMBED_CHUNK: usize = 64;
pub const LOG_HEADER: &str = "unit\tL\tL_t\tL_d\tL_s\tlambda_d\tval_map_at_k";

/// Domain-reversal strength for schedule unit `i`: `clip((i - 5) / 20, 0, 1)`.
pub fn lambda_d_schedule(i: usize) -> f64 {
    ((i as f64 - 5.0) / 20.0).clamp(0.0, 1.0)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} loss ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },
    #[error("{term} loss: {source}")]
    Loss {
        term: &'static str,
        #[source]
        source: LossError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Epoch,
    Iteration,
}

impl std::str::FromStr for ScheduleUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "epoch" => Ok(ScheduleUnit::Epoch),
            "iteration" => Ok(ScheduleUnit::Iteration),
            other => Err(format!("unknown schedule unit {other:?} (epoch or iteration)")),
        }
    }
}

impl std::fmt::Display for ScheduleUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleUnit::Epoch => "epoch",
            ScheduleUnit::Iteration => "iteration",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_units: usize,
    pub batch_size: usize,
    pub schedule_unit: ScheduleUnit,
    pub patience: usize,
    /// Validate after every this many units (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
    /// Negative-class softmax temperature.
    pub tau: f64,
    /// Share of each seen class's sketches and photos held out for validation.
    pub val_fraction: f64,
    /// Steps per epoch; defaults to one pass over the training sketches.
    pub steps_per_epoch: Option<usize>,
    pub eval_k: usize,
    /// Images per forward pass when embedding for validation.
    pub embed_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            max_units: DEFAULT_MAX_UNITS,
            batch_size: DEFAULT_BATCH_SIZE,
            schedule_unit: ScheduleUnit::Epoch,
            patience: DEFAULT_PATIENCE,
            eval_every: DEFAULT_EVAL_EVERY,
            seed: 0,
            tau: DEFAULT_TAU,
            val_fraction: DEFAULT_VAL_FRACTION,
            steps_per_epoch: None,
            eval_k: DEFAULT_K,
            embed_chunk: DEFAULT_EMBED_CHUNK,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.max_units == 0 || self.patience == 0 || self.eval_every == 0 {
            return bad("max_units, patience and eval_every must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_k == 0 || self.embed_chunk == 0 {
            return bad("batch_size, eval_k and embed_chunk must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Mean loss values of a step or a unit.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub domain: f64,
    pub semantic: f64,
}

/// Image views of one sampled batch.
pub struct BatchImages<'a> {
    pub anchors: Vec<&'a Image>,
    pub positives: Vec<&'a Image>,
    pub negatives: Vec<&'a Image>,
    pub semantics: Vec<&'a [f32]>,
}

impl<'a> BatchImages<'a> {
    pub fn gather(store: &'a ImageStore, batch: &'a TripletBatch) -> Self {
        BatchImages {
            anchors: store.select(Modality::Sketch, &batch.anchors),
            positives: store.select(Modality::Photo, &batch.positives),
            negatives: store.select(Modality::Photo, &batch.negatives),
            semantics: batch.semantics.iter().map(Vec::as_slice).collect(),
        }
    }
}

fn finite(term: &'static str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFiniteLoss { term, value: v })
    }
}

/// Computes the weighted loss on one batch and applies `θ ← θ − lr·∇θ` to
/// every parameter.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    batch: &BatchImages<'_>,
    weights: &LossWeights,
    lambda_d: f64,
    lr: f64,
) -> Result<LossBreakdown, TrainError> {
    let loss = |term: &'static str| move |source: LossError| TrainError::Loss { term, source };
    weights.validate().map_err(loss("total"))?;
    let t = T::from_f64_lossy;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let a = g.constant(model.input_tensor(Branch::Sketch, &batch.anchors)?);
    let p = g.constant(model.input_tensor(Branch::Photo, &batch.positives)?);
    let n = g.constant(model.input_tensor(Branch::Photo, &batch.negatives)?);
    let e = TripletEmbeddings {
        anchors: model.embed(&mut g, &bound, Branch::Sketch, a)?,
        positives: model.embed(&mut g, &bound, Branch::Photo, p)?,
        negatives: model.embed(&mut g, &bound, Branch::Photo, n)?,
    };
    let s = g.constant(semantics_tensor(&batch.semantics).map_err(loss("semantic"))?);

    let lt = triplet_loss(&mut g, &e, t(weights.margin)).map_err(loss("triplet"))?;
    let ld = domain_loss(&mut g, model, &bound, &e, t(lambda_d)).map_err(loss("domain"))?;
    let ls = semantic_loss(&mut g, model, &bound, &e, s, t(weights.lambda_s)).map_err(loss("semantic"))?;
    let combine = |g: &mut Graph<T>| -> Result<_, crate::autodiff::AutodiffError> {
        let wt = g.scale(lt, t(weights.alpha_triplet))?;
        let wd = g.scale(ld, t(weights.alpha_domain))?;
        let ws = g.scale(ls, t(weights.alpha_semantic))?;
        let sum = g.add(wt, wd)?;
        g.add(sum, ws)
    };
    let total = combine(&mut g).map_err(|e| loss("total")(e.into()))?;

    let scalar = |v| g.value(v).item().map_or(f64::NAN, |x: T| x.as_f64());
    let out = LossBreakdown {
        triplet: finite("triplet", scalar(lt))?,
        domain: finite("domain", scalar(ld))?,
        semantic: finite("semantic", scalar(ls))?,
        total: finite("total", scalar(total))?,
    };
    g.backward(total).map_err(|e| loss("total")(e.into()))?;
    if lr == 0.0 {
        return Ok(out);
    }
    let step = t(lr);
    for (name, var) in bound.iter() {
        let Some(grad) = g.grad(var) else { continue };
        let param = model.params.get_mut(name).expect("bound from these params");
        for (w, &d) in param.data_mut().iter_mut().zip(grad.data()) {
            *w = *w - step * d;
        }
    }
    Ok(out)
}

/// Corpus indices used for training and for validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Holdout {
    pub train_sketches: Vec<usize>,
    pub train_photos: Vec<usize>,
    pub val_sketches: Vec<usize>,
    pub val_photos: Vec<usize>,
}

/// Moves `floor(fraction · n)` records of every seen class and modality
/// into validation, always leaving at least one for training.
pub fn make_holdout(corpus: &Corpus, split: &ZeroShotSplit, fraction: f64, seed: u64) -> Holdout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x0056_414c);
    let mut part = |modality: Modality| -> (Vec<usize>, Vec<usize>) {
        let labels = corpus.labels(modality);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); corpus.classes().len()];
        for &i in split.indices(modality, false) {
            by_class[labels[i]].push(i);
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for mut members in by_class {
            members.shuffle(&mut rng);
            let k = ((members.len() as f64 * fraction).floor() as usize).min(members.len().saturating_sub(1));
            val.extend_from_slice(&members[..k]);
            train.extend_from_slice(&members[k..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (train, val)
    };
    let (train_sketches, val_sketches) = part(Modality::Sketch);
    let (train_photos, val_photos) = part(Modality::Photo);
    Holdout {
        train_sketches,
        train_photos,
        val_sketches,
        val_photos,
    }
}

/// Everything `fit` reads.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub store: &'a ImageStore,
    pub split: &'a ZeroShotSplit,
    pub semantics: &'a SemanticTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub unit: usize,
    pub losses: LossBreakdown,
    pub lambda_d: f64,
    /// Validation mAP@K, when evaluated this unit.
    pub val_map: Option<f64>,
}

impl LogRow {
    fn tsv(&self) -> String {
        let l = &self.losses;
        let val = self.val_map.map_or(String::new(), |v| v.to_string());
        format!("{}\t{}\t{}\t{}\t{}\t{}\t{}\n", self.unit, l.total, l.triplet, l.domain, l.semantic, self.lambda_d, val)
    }
}

pub fn log_tsv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.tsv());
    }
    out
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters of the best validation unit (the last unit when there is
    /// no validation data).
    pub model: Model<f32>,
    pub log: Vec<LogRow>,
    pub best_unit: usize,
    pub best_val: Option<f64>,
    pub holdout: Holdout,
}

/// Validation mAP@K of sketches against photos, both from seen classes.
pub fn validation_map(
    model: &Model<f32>,
    data: &TrainData<'_>,
    sketches: &[usize],
    photos: &[usize],
    k: usize,
    chunk: usize,
) -> Result<f64, TrainError> {
    let index = retrieval::build_index(model, data.corpus, data.store, photos, chunk)?;
    let report = score_queries(model, data, &index, sketches, k, chunk)?;
    Ok(report.map_at_k)
}

/// Embeds the sketches, ranks them against `index` and scores the result.
pub fn score_queries(
    model: &Model<f32>,
    data: &TrainData<'_>,
    index: &GalleryIndex,
    sketches: &[usize],
    k: usize,
    chunk: usize,
) -> Result<metrics::EvalReport, TrainError> {
    let images = data.store.select(Modality::Sketch, sketches);
    let queries = retrieval::embed_parallel(model, Branch::Sketch, &images, chunk)?;
    let results = retrieval::batch_query(index, &queries, None, 1)?;
    let rankings: Vec<Vec<usize>> = results.into_iter().map(|r| r.indices).collect();
    let labels: Vec<&str> = sketches.iter().map(|&i| data.corpus.sketches()[i].class.as_str()).collect();
    Ok(metrics::evaluate(&rankings, &labels, index.labels(), k)?)
}

/// Zero-shot test protocol: unseen-class sketches ranked against the full
/// unseen-class photo gallery.
pub fn evaluate_unseen(
    model: &Model<f32>,
    data: &TrainData<'_>,
    k: usize,
    chunk: usize,
) -> Result<metrics::EvalReport, TrainError> {
    let photos = data.split.indices(Modality::Photo, true);
    let index = retrieval::build_index(model, data.corpus, data.store, photos, chunk)?;
    score_queries(model, data, &index, data.split.indices(Modality::Sketch, true), k, chunk)
}

struct RunFiles {
    dir: PathBuf,
    log: std::fs::File,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join("train_log.tsv");
        let mut log = std::fs::File::create(&path).map_err(|source| TrainError::Io { path, source })?;
        writeln!(log, "{LOG_HEADER}").map_err(io)?;
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            log,
        })
    }

    fn append(&mut self, row: &LogRow) -> Result<(), TrainError> {
        self.log
            .write_all(row.tsv().as_bytes())
            .and_then(|_| self.log.flush())
            .map_err(|source| TrainError::Io {
                path: self.dir.join("train_log.tsv"),
                source,
            })
    }
}

/// Runs schedule units until `max_units` or until validation has not
/// improved for `patience` units. Returns the best parameters.
pub fn fit(
    mut model: Model<f32>,
    data: TrainData<'_>,
    config: &TrainConfig,
    weights: &LossWeights,
    run_dir: Option<&Path>,
) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    weights.validate().map_err(|source| TrainError::Loss { term: "total", source })?;
    data.split.validate_for_training(data.corpus)?;
    let missing: Vec<String> = data
        .split
        .seen()
        .iter()
        .filter(|c| data.semantics.get(c).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingSemantics(missing).into());
    }

    let holdout = make_holdout(data.corpus, data.split, config.val_fraction, config.seed);
    let sampler = TripletSampler::new(
        data.corpus,
        &holdout.train_sketches,
        &holdout.train_photos,
        data.semantics,
        config.tau,
    )?;
    let validate = !holdout.val_sketches.is_empty() && !holdout.val_photos.is_empty();
    let steps = match config.schedule_unit {
        ScheduleUnit::Iteration => 1,
        ScheduleUnit::Epoch => config
            .steps_per_epoch
            .unwrap_or_else(|| holdout.train_sketches.len().div_ceil(config.batch_size)),
    };
    let mut files = run_dir.map(RunFiles::create).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    for unit in 0..config.max_units {
        let lambda_d = lambda_d_schedule(unit);
        let mut sum = LossBreakdown::default();
        for _ in 0..steps {
            let batch = sampler.sample(config.batch_size, &mut rng);
            let images = BatchImages::gather(data.store, &batch);
            let l = train_step(&mut model, &images, weights, lambda_d, config.lr)?;
            sum.total += l.total;
            sum.triplet += l.triplet;
            sum.domain += l.domain;
            sum.semantic += l.semantic;
        }
        let n = steps as f64;
        let losses = LossBreakdown {
            total: sum.total / n,
            triplet: sum.triplet / n,
            domain: sum.domain / n,
            semantic: sum.semantic / n,
        };
        let last = unit + 1 == config.max_units;
        let val_map = if validate && ((unit + 1) % config.eval_every == 0 || last) {
            Some(validation_map(
                &model,
                &data,
                &holdout.val_sketches,
                &holdout.val_photos,
                config.eval_k,
                config.embed_chunk,
            )?)
        } else {
            None
        };
        let row = LogRow {
            unit,
            losses,
            lambda_d,
            val_map,
        };
        if let Some(f) = files.as_mut() {
            f.append(&row)?;
            save_checkpoint(&model, &f.dir.join("last.ckpt"))?;
        }
        log.push(row);

        let improved = match (val_map, &best) {
            (Some(v), Some((b, _, _))) => v > *b,
            (Some(_), None) => true,
            (None, _) => !validate,
        };
        if improved {
            let metric = val_map.unwrap_or(f64::NEG_INFINITY);
            if let Some(f) = files.as_ref() {
                save_checkpoint(&model, &f.dir.join("best.ckpt"))?;
            }
            best = Some((metric, unit, model.clone()));
        }
        let best_unit = best.as_ref().map_or(0, |b| b.1);
        if validate && val_map.is_some() && unit - best_unit >= config.patience {
            break;
        }
    }
    let (metric, best_unit, model) = best.unwrap_or((f64::NEG_INFINITY, 0, model));
    Ok(FitOutcome {
        model,
        log,
        best_unit,
        best_val: metric.is_finite().then_some(metric),
        holdout,
    })
}

/// Mean over queries of the fraction of the gallery sharing the query's
/// class: the expected mAP-like score of a random ranking.
pub fn chance_baseline<Q: AsRef<str>, G: AsRef<str>>(query_labels: &[Q], gallery_labels: &[G]) -> f64 {
    if query_labels.is_empty() || gallery_labels.is_empty() {
        return 0.0;
    }
    let n = gallery_labels.len() as f64;
    let total: f64 = query_labels
        .iter()
        .map(|q| gallery_labels.iter().filter(|g| g.as_ref() == q.as_ref()).count() as f64 / n)
        .sum();
    total / query_labels.len() as f64
}

/// One line per field, for run directories.
pub fn config_summary(config: &TrainConfig, weights: &LossWeights) -> String {
    let mut s = String::new();
    let steps = config.steps_per_epoch.map_or("auto".to_string(), |v| v.to_string());
    writeln!(s, "lr={}", config.lr).unwrap();
    writeln!(s, "max_units={}", config.max_units).unwrap();
    writeln!(s, "batch_size={}", config.batch_size).unwrap();
    writeln!(s, "schedule_unit={}", config.schedule_unit).unwrap();
    writeln!(s, "patience={}", config.patience).unwrap();
    writeln!(s, "eval_every={}", config.eval_every).unwrap();
    writeln!(s, "seed={}", config.seed).unwrap();
    writeln!(s, "tau={}", config.tau).unwrap();
    writeln!(s, "val_fraction={}", config.val_fraction).unwrap();
    writeln!(s, "steps_per_epoch={steps}").unwrap();
    writeln!(s, "alpha=({},{},{})", weights.alpha_triplet, weights.alpha_domain, weights.alpha_semantic).unwrap();
    writeln!(s, "margin={}", weights.margin).unwrap();
    writeln!(s, "lambda_s={}", weights.lambda_s).unwrap();
    s
}
