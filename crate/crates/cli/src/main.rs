mod args;
mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{CommandFactory, FromArgMatches};

use args::{AblateArgs, Cli, Command, EmbedArgs, EvalArgs, GenSynthArgs, Partition, RetrieveArgs, SplitArgs, TrainArgs};
use doodlerank::benchmark::{ablation_tsv, run_ablation, ABLATION_GRID};
use doodlerank::data::{
    gen_synthetic, load_manifest, load_word_vectors, make_split, save_corpus, write_word_vectors, Corpus, Exclusions,
    ImageStore, Modality, SemanticTable, ZeroShotSplit,
};
use doodlerank::encoder::{load_checkpoint, Model};
use doodlerank::metrics;
use doodlerank::retrieval::{self, GalleryIndex, RANKINGS_HEADER};
use doodlerank::trainer::{config_summary, fit, TrainData};

const INCOMPLETE_MARKER: &str = "INCOMPLETE";

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes `path.partial` and renames it into place.
fn write_atomic(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    let tmp = partial_path(path);
    std::fs::write(&tmp, contents).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", tmp.display()))
}

fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    ensure!(!a.out.exists(), "{} already exists", a.out.display());
    let tmp = partial_path(&a.out);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).with_context(|| format!("cannot clear {}", tmp.display()))?;
    }
    let (corpus, table) = gen_synthetic(&a.synth_config())?;
    std::fs::create_dir_all(&tmp)?;
    save_corpus(&corpus, &tmp)?;
    write_word_vectors(&table, &tmp.join("semantics.txt"))?;
    std::fs::rename(&tmp, &a.out)?;
    println!(
        "{} classes, {} photos, {} sketches -> {}",
        corpus.classes().len(),
        corpus.photos().len(),
        corpus.sketches().len(),
        a.out.display()
    );
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let corpus = load_manifest(&a.manifest)?;
    let exclusions = Exclusions {
        force_seen: a.force_seen.0.clone(),
        force_unseen: a.force_unseen.0.clone(),
    };
    let split = make_split(&corpus, a.unseen, a.seed, &exclusions)?;
    write_atomic(&a.out, split.to_tsv())?;
    println!("{} seen, {} unseen -> {}", split.seen().len(), split.unseen().len(), a.out.display());
    Ok(())
}

struct Loaded {
    corpus: Corpus,
    store: ImageStore,
    split: ZeroShotSplit,
    table: SemanticTable,
}

fn load_training(manifest: &Path, split: &Path, semantics: &Path, dim: usize) -> Result<Loaded> {
    let corpus = load_manifest(manifest)?;
    let split = ZeroShotSplit::read(split, &corpus)?;
    let table = load_word_vectors(semantics, split.seen(), dim)?;
    let store = corpus.load_images()?;
    Ok(Loaded {
        corpus,
        store,
        split,
        table,
    })
}

impl Loaded {
    fn data(&self) -> TrainData<'_> {
        TrainData {
            corpus: &self.corpus,
            store: &self.store,
            split: &self.split,
            semantics: &self.table,
        }
    }
}

fn gnuplot_script(k: usize) -> String {
    format!(
        "# gnuplot -p train_log.gp\n\
         set datafile separator \"\\t\"\n\
         set datafile missing \"\"\n\
         set xlabel \"unit\"\n\
         set ylabel \"loss\"\n\
         set y2label \"validation mAP@{k}\"\n\
         set y2tics\n\
         set key outside\n\
         plot \"train_log.tsv\" using 1:2 with lines title \"L\", \\\n\
         \x20    \"\" using 1:3 with lines title \"L_t\", \\\n\
         \x20    \"\" using 1:4 with lines title \"L_d\", \\\n\
         \x20    \"\" using 1:5 with lines title \"L_s\", \\\n\
         \x20    \"\" using 1:7 axes x1y2 with linespoints title \"val mAP@{k}\"\n"
    )
}

fn train(a: &TrainArgs) -> Result<()> {
    let m = &a.model;
    let (encoder, heads, weights, config) = (m.encoder(), m.heads()?, m.weights(), m.train());
    let loaded = load_training(&a.manifest, &a.split, &a.semantics, m.semantic_dim)?;
    let model = Model::new(encoder, heads, config.seed)?;

    std::fs::create_dir_all(&a.run_dir).with_context(|| format!("cannot create {}", a.run_dir.display()))?;
    let marker = a.run_dir.join(INCOMPLETE_MARKER);
    std::fs::write(&marker, "training has not finished\n")?;
    let summary = format!("{}{}", model.config_text(), config_summary(&config, &weights));
    write_atomic(&a.run_dir.join("config.txt"), summary)?;
    if a.gnuplot {
        write_atomic(&a.run_dir.join("train_log.gp"), gnuplot_script(config.eval_k))?;
    }

    let out = fit(model, loaded.data(), &config, &weights, Some(&a.run_dir))?;
    std::fs::remove_file(&marker)?;
    match out.best_val {
        Some(v) => println!("best unit {} validation mAP@{} {v:.6}", out.best_unit, config.eval_k),
        None => println!("trained {} units (no validation data)", out.log.len()),
    }
    Ok(())
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let model: Model<f32> = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let corpus = load_manifest(&a.manifest)?;
    let modality = Modality::from(a.modality);
    let indices: Vec<usize> = match (a.partition, &a.split) {
        (Partition::All, _) => (0..corpus.records(modality).len()).collect(),
        (_, None) => bail!("--split is required with --partition {:?}", a.partition),
        (p, Some(path)) => ZeroShotSplit::read(path, &corpus)?
            .indices(modality, p == Partition::Unseen)
            .to_vec(),
    };
    let store = corpus.load_images()?;
    let index = retrieval::build_embeddings(&model, &corpus, &store, modality, &indices, a.chunk)?;
    index.save(&a.out)?;
    println!("{} {modality} embeddings of dim {} -> {}", index.len(), index.dim(), a.out.display());
    Ok(())
}

fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let gallery = GalleryIndex::load(&a.index).with_context(|| format!("cannot load {}", a.index.display()))?;
    let queries = GalleryIndex::load(&a.queries).with_context(|| format!("cannot load {}", a.queries.display()))?;
    ensure!(
        gallery.dim() == queries.dim(),
        "gallery dimension {} differs from query dimension {}",
        gallery.dim(),
        queries.dim()
    );
    let rows: Vec<&[f32]> = (0..queries.len()).map(|i| queries.row(i)).collect();
    let k = (a.k > 0).then_some(a.k);
    let results = retrieval::batch_query(&gallery, &rows, k, a.shards)?;
    let tsv = retrieval::rankings_tsv(&gallery, queries.ids(), queries.labels(), &results);
    write_atomic(&a.out, tsv)?;
    println!("{} queries ranked against {} items -> {}", queries.len(), gallery.len(), a.out.display());
    Ok(())
}

struct ParsedRankings {
    query_ids: Vec<String>,
    query_labels: Vec<String>,
    rankings: Vec<Vec<usize>>,
}

fn parse_rankings(text: &str, gallery: &GalleryIndex, name: &str) -> Result<ParsedRankings> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some(RANKINGS_HEADER), "{name}: header must be {RANKINGS_HEADER:?}");
    let position: HashMap<&str, usize> = gallery.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut out = ParsedRankings {
        query_ids: Vec::new(),
        query_labels: Vec::new(),
        rankings: Vec::new(),
    };
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (n, line) in lines.enumerate() {
        let at = || format!("{name}:{}", n + 2);
        let f: Vec<&str> = line.split('\t').collect();
        ensure!(f.len() == 6, "{}: expected 6 fields, got {}", at(), f.len());
        let q = match seen.get(f[0]) {
            Some(&q) => q,
            None => {
                let q = out.rankings.len();
                seen.insert(f[0].to_string(), q);
                out.query_ids.push(f[0].to_string());
                out.query_labels.push(f[1].to_string());
                out.rankings.push(Vec::new());
                q
            }
        };
        ensure!(out.query_labels[q] == f[1], "{}: query {} changes class", at(), f[0]);
        let rank: usize = f[2].parse().with_context(|| format!("{}: bad rank {:?}", at(), f[2]))?;
        ensure!(
            rank == out.rankings[q].len() + 1,
            "{}: rank {rank} of query {} is out of order",
            at(),
            f[0]
        );
        let &g = position
            .get(f[3])
            .with_context(|| format!("{}: gallery item {} is not in the gallery index", at(), f[3]))?;
        ensure!(gallery.labels()[g] == f[4], "{}: gallery item {} has class {} in the index", at(), f[3], gallery.labels()[g]);
        out.rankings[q].push(g);
    }
    ensure!(!out.rankings.is_empty(), "{name}: no rankings");
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let gallery = GalleryIndex::load(&a.gallery).with_context(|| format!("cannot load {}", a.gallery.display()))?;
    let text = std::fs::read_to_string(&a.rankings).with_context(|| format!("cannot read {}", a.rankings.display()))?;
    let parsed = parse_rankings(&text, &gallery, &a.rankings.display().to_string())?;
    let report = metrics::evaluate(&parsed.rankings, &parsed.query_labels, gallery.labels(), a.k)?;
    let k = report.k;
    println!("mAP\t{:.6}", report.map_full);
    println!("mAP@{k}\t{:.6}", report.map_at_k);
    println!("P@{k}\t{:.6}", report.p_at_k);
    if report.excluded > 0 {
        println!("excluded\t{}", report.excluded);
    }
    if let Some(p) = &a.out {
        write_atomic(p, report.to_tsv())?;
    }
    if let Some(p) = &a.json {
        write_atomic(p, report.to_json() + "\n")?;
    }
    if let Some(p) = &a.per_query {
        write_atomic(p, report.per_query_tsv(Some(&parsed.query_ids)))?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let m = &a.model;
    let (encoder, heads, weights, config) = (m.encoder(), m.heads()?, m.weights(), m.train());
    let loaded = load_training(&a.manifest, &a.split, &a.semantics, m.semantic_dim)?;
    let rows = run_ablation(
        loaded.data(),
        &encoder,
        &heads,
        &config,
        &weights,
        &ABLATION_GRID,
        a.run_dir.as_deref(),
    )?;
    let tsv = ablation_tsv(&rows);
    write_atomic(&a.out, &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn parse_args(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let matches = cmd.try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match parse_args(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
