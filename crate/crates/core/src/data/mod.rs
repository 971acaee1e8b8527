//! Corpora, zero-shot splits, class word vectors, the synthetic shape corpus
//! and semantic hard-negative triplet sampling.

mod manifest;
mod sampler;
mod split;
mod synth;
mod vectors;

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::imaging::{Image, ImageError};
use crate::parallel;

pub use manifest::{load_manifest, parse_manifest, save_corpus, write_manifest, MANIFEST_HEADER};
pub use sampler::{TripletBatch, TripletSampler, DEFAULT_TAU};
pub use split::{make_split, Exclusions, ZeroShotSplit, SPLIT_HEADER};
pub use synth::{gen_synthetic, ShapeFamily, SynthConfig, SynthSpec};
pub use vectors::{load_word_vectors, parse_word_vectors, write_word_vectors, SemanticTable};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected header {expected:?}, found {found:?}")]
    Header {
        path: String,
        expected: String,
        found: String,
    },
    #[error("line {line}: unknown modality {tag:?} (expected photo or sketch)")]
    UnknownModality { line: usize, tag: String },
    #[error("{path} line {line}: {msg}")]
    MalformedLine { path: String, line: usize, msg: String },
    #[error("duplicate {modality} id {id:?}")]
    DuplicateId { modality: Modality, id: String },
    #[error("no semantic vector for classes: {}", .0.join(", "))]
    MissingSemantics(Vec<String>),
    #[error("semantic vector for {0:?} is not finite or has zero norm")]
    InvalidSemantics(String),
    #[error("line {line}: expected {expected} components, found {found}")]
    MalformedVector { line: usize, expected: usize, found: usize },
    #[error("n_unseen = {n_unseen} must lie strictly between 0 and {classes}")]
    SplitRange { n_unseen: usize, classes: usize },
    #[error("contradictory exclusions: {0}")]
    Exclusions(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("class {class:?} has no {modality} records available")]
    EmptyClass { class: String, modality: Modality },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("record {id:?}: {source}")]
    Image {
        id: String,
        #[source]
        source: ImageError,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path)
        } else {
            DataError::Io { path, source }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Photo,
    Sketch,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Photo => "photo",
            Modality::Sketch => "sketch",
        }
    }

    /// Planes used when decoding from disk.
    pub fn channels(self) -> usize {
        match self {
            Modality::Photo => 3,
            Modality::Sketch => 1,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "photo" => Ok(Modality::Photo),
            "sketch" => Ok(Modality::Sketch),
            other => Err(other.to_string()),
        }
    }
}

/// Where a record's pixels come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Arc<Image>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub source: ImageSource,
    pub class: String,
}

/// Photos and sketches with class labels. Classes are kept sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    photos: Vec<Record>,
    sketches: Vec<Record>,
    classes: Vec<String>,
    photo_labels: Vec<usize>,
    sketch_labels: Vec<usize>,
}

impl Corpus {
    pub fn new(photos: Vec<Record>, sketches: Vec<Record>) -> Result<Self, DataError> {
        for (modality, records) in [(Modality::Photo, &photos), (Modality::Sketch, &sketches)] {
            let mut seen = HashSet::new();
            for r in records {
                if !seen.insert(r.id.as_str()) {
                    return Err(DataError::DuplicateId {
                        modality,
                        id: r.id.clone(),
                    });
                }
            }
        }
        let classes: Vec<String> = photos
            .iter()
            .chain(&sketches)
            .map(|r| r.class.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let label = |r: &Record| classes.binary_search(&r.class).expect("class collected");
        let photo_labels = photos.iter().map(label).collect();
        let sketch_labels = sketches.iter().map(label).collect();
        Ok(Corpus {
            photos,
            sketches,
            classes,
            photo_labels,
            sketch_labels,
        })
    }

    pub fn photos(&self) -> &[Record] {
        &self.photos
    }

    pub fn sketches(&self) -> &[Record] {
        &self.sketches
    }

    pub fn records(&self, modality: Modality) -> &[Record] {
        match modality {
            Modality::Photo => &self.photos,
            Modality::Sketch => &self.sketches,
        }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    /// Class index of every record of a modality, in record order.
    pub fn labels(&self, modality: Modality) -> &[usize] {
        match modality {
            Modality::Photo => &self.photo_labels,
            Modality::Sketch => &self.sketch_labels,
        }
    }

    /// Every class must have a semantic vector before training.
    pub fn validate_semantics(&self, table: &SemanticTable) -> Result<(), DataError> {
        let missing: Vec<String> = self.classes.iter().filter(|c| table.get(c).is_none()).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(DataError::MissingSemantics(missing))
        }
    }

    /// Decodes (or shares) every image of the corpus.
    pub fn load_images(&self) -> Result<ImageStore, DataError> {
        let load = |modality: Modality| -> Result<Vec<Arc<Image>>, DataError> {
            let records = self.records(modality);
            parallel::map_indexed(records.len(), |i| {
                let r = &records[i];
                match &r.source {
                    ImageSource::Memory(im) => Ok(Arc::clone(im)),
                    ImageSource::File(p) => Image::load(p, modality.channels())
                        .map(Arc::new)
                        .map_err(|source| DataError::Image { id: r.id.clone(), source }),
                }
            })
            .into_iter()
            .collect()
        };
        Ok(ImageStore {
            photos: load(Modality::Photo)?,
            sketches: load(Modality::Sketch)?,
        })
    }
}

/// Decoded pixels for a [`Corpus`], indexed like its records.
#[derive(Clone, Debug)]
pub struct ImageStore {
    pub photos: Vec<Arc<Image>>,
    pub sketches: Vec<Arc<Image>>,
}

impl ImageStore {
    pub fn get(&self, modality: Modality, index: usize) -> &Image {
        match modality {
            Modality::Photo => &self.photos[index],
            Modality::Sketch => &self.sketches[index],
        }
    }

    pub fn select(&self, modality: Modality, indices: &[usize]) -> Vec<&Image> {
        indices.iter().map(|&i| self.get(modality, i)).collect()
    }
}
