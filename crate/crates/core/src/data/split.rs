use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, DataError, Modality};

pub const SPLIT_HEADER: &str = "class\tpartition";

/// Classes forced into one side of the split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Exclusions {
    pub force_seen: Vec<String>,
    pub force_unseen: Vec<String>,
}

/// Disjoint seen/unseen class partition and the record indices it induces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroShotSplit {
    seen: Vec<String>,
    unseen: Vec<String>,
    photos_seen: Vec<usize>,
    photos_unseen: Vec<usize>,
    sketches_seen: Vec<usize>,
    sketches_unseen: Vec<usize>,
}

/// Picks `n_unseen` classes uniformly at random (after honoring
/// exclusions) as the test partition.
pub fn make_split(corpus: &Corpus, n_unseen: usize, seed: u64, exclusions: &Exclusions) -> Result<ZeroShotSplit, DataError> {
    let total = corpus.classes().len();
    if n_unseen == 0 || n_unseen >= total {
        return Err(DataError::SplitRange {
            n_unseen,
            classes: total,
        });
    }
    for c in exclusions.force_seen.iter().chain(&exclusions.force_unseen) {
        if corpus.class_index(c).is_none() {
            return Err(DataError::UnknownClass(c.clone()));
        }
    }
    let forced_seen: BTreeSet<&str> = exclusions.force_seen.iter().map(String::as_str).collect();
    let forced_unseen: BTreeSet<&str> = exclusions.force_unseen.iter().map(String::as_str).collect();
    if let Some(c) = forced_seen.intersection(&forced_unseen).next() {
        return Err(DataError::Exclusions(format!("{c:?} is forced both seen and unseen")));
    }
    if forced_unseen.len() > n_unseen {
        return Err(DataError::Exclusions(format!(
            "{} classes forced unseen but only {n_unseen} unseen requested",
            forced_unseen.len()
        )));
    }
    if forced_seen.len() > total - n_unseen {
        return Err(DataError::Exclusions(format!(
            "{} classes forced seen but only {} seen slots",
            forced_seen.len(),
            total - n_unseen
        )));
    }
    let mut free: Vec<&str> = corpus
        .classes()
        .iter()
        .map(String::as_str)
        .filter(|c| !forced_seen.contains(c) && !forced_unseen.contains(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    free.shuffle(&mut rng);
    let mut unseen: BTreeSet<&str> = forced_unseen;
    unseen.extend(free.into_iter().take(n_unseen - unseen.len()));
    let seen: Vec<String> = corpus
        .classes()
        .iter()
        .filter(|c| !unseen.contains(c.as_str()))
        .cloned()
        .collect();
    let unseen: Vec<String> = unseen.into_iter().map(str::to_string).collect();
    ZeroShotSplit::from_partition(corpus, seen, unseen)
}

impl ZeroShotSplit {
    /// Builds a split from explicit class lists, checking disjointness and
    /// coverage of the corpus classes.
    pub fn from_partition(corpus: &Corpus, mut seen: Vec<String>, mut unseen: Vec<String>) -> Result<Self, DataError> {
        seen.sort();
        unseen.sort();
        let s: BTreeSet<&String> = seen.iter().collect();
        let u: BTreeSet<&String> = unseen.iter().collect();
        if s.len() != seen.len() || u.len() != unseen.len() {
            return Err(DataError::InvalidSplit("class listed twice".into()));
        }
        if let Some(c) = s.intersection(&u).next() {
            return Err(DataError::InvalidSplit(format!("{c:?} is both seen and unseen")));
        }
        for c in s.iter().chain(&u) {
            if corpus.class_index(c).is_none() {
                return Err(DataError::UnknownClass((*c).clone()));
            }
        }
        if let Some(c) = corpus.classes().iter().find(|c| !s.contains(c) && !u.contains(c)) {
            return Err(DataError::InvalidSplit(format!("{c:?} is in neither partition")));
        }
        let is_unseen: Vec<bool> = corpus.classes().iter().map(|c| u.contains(c)).collect();
        let part = |m: Modality, want: bool| -> Vec<usize> {
            corpus
                .labels(m)
                .iter()
                .enumerate()
                .filter(|(_, &l)| is_unseen[l] == want)
                .map(|(i, _)| i)
                .collect()
        };
        Ok(ZeroShotSplit {
            photos_seen: part(Modality::Photo, false),
            photos_unseen: part(Modality::Photo, true),
            sketches_seen: part(Modality::Sketch, false),
            sketches_unseen: part(Modality::Sketch, true),
            seen,
            unseen,
        })
    }

    pub fn seen(&self) -> &[String] {
        &self.seen
    }

    pub fn unseen(&self) -> &[String] {
        &self.unseen
    }

    pub fn is_unseen(&self, class: &str) -> bool {
        self.unseen.binary_search_by(|c| c.as_str().cmp(class)).is_ok()
    }

    /// Record indices (into the corpus) of one modality/partition.
    pub fn indices(&self, modality: Modality, unseen: bool) -> &[usize] {
        match (modality, unseen) {
            (Modality::Photo, false) => &self.photos_seen,
            (Modality::Photo, true) => &self.photos_unseen,
            (Modality::Sketch, false) => &self.sketches_seen,
            (Modality::Sketch, true) => &self.sketches_unseen,
        }
    }

    /// Training needs at least two seen classes, each with a sketch and a
    /// photo.
    pub fn validate_for_training(&self, corpus: &Corpus) -> Result<(), DataError> {
        if self.seen.len() < 2 {
            return Err(DataError::InvalidSplit("need at least two seen classes".into()));
        }
        for modality in [Modality::Photo, Modality::Sketch] {
            let labels = corpus.labels(modality);
            let present: BTreeSet<usize> = self.indices(modality, false).iter().map(|&i| labels[i]).collect();
            for c in &self.seen {
                let id = corpus.class_index(c).expect("validated");
                if !present.contains(&id) {
                    return Err(DataError::EmptyClass {
                        class: c.clone(),
                        modality,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(SPLIT_HEADER);
        out.push('\n');
        let mut rows: Vec<(&str, &str)> = self.seen.iter().map(|c| (c.as_str(), "seen")).collect();
        rows.extend(self.unseen.iter().map(|c| (c.as_str(), "unseen")));
        rows.sort();
        for (c, p) in rows {
            writeln!(out, "{c}\t{p}").expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_tsv()).map_err(|e| DataError::io(path, e))
    }

    pub fn parse(text: &str, corpus: &Corpus, name: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim_end_matches('\r')).unwrap_or("");
        if header != SPLIT_HEADER {
            return Err(DataError::Header {
                path: name.into(),
                expected: SPLIT_HEADER.into(),
                found: header.into(),
            });
        }
        let (mut seen, mut unseen) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let malformed = |msg: String| DataError::MalformedLine {
                path: name.into(),
                line: i + 1,
                msg,
            };
            let (class, part) = line.split_once('\t').ok_or_else(|| malformed("expected class<TAB>partition".into()))?;
            match part {
                "seen" => seen.push(class.to_string()),
                "unseen" => unseen.push(class.to_string()),
                other => return Err(malformed(format!("unknown partition {other:?}"))),
            }
        }
        Self::from_partition(corpus, seen, unseen)
    }

    pub fn read(path: &Path, corpus: &Corpus) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text, corpus, &path.display().to_string())
    }
}
