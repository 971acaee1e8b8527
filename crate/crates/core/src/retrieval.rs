//! Exact ℓ2 gallery search.
//!
//! Squared distances come from `‖q‖² + ‖g‖² − 2 q·g` with f64 accumulation
//! over f32 storage. Gallery norms use the same dot kernel as the cross term,
//! so a query equal to a gallery row gets distance exactly zero. Ties are
//! broken by ascending gallery index.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{Corpus, DataError, ImageStore, Modality};
use crate::encoder::{Branch, EncoderError, Model};
use crate::parallel;

pub const INDEX_MAGIC: &[u8; 4] = b"DRIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding has dimension {got}, index expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("duplicate gallery id {0:?}")]
    DuplicateId(String),
    #[error("{ids} ids, {labels} labels and {rows} embedding rows do not line up")]
    Length { ids: usize, labels: usize, rows: usize },
    #[error("non-finite embedding value for {0:?}")]
    NonFinite(String),
    #[error("shard count must be at least 1")]
    Shards,
    #[error("malformed index: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Dot product of two f32 slices accumulated in f64.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * *y as f64;
    }
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Immutable gallery of embeddings with their squared norms.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    dim: usize,
    ids: Vec<String>,
    labels: Vec<String>,
    data: Vec<f32>,
    sq_norms: Vec<f64>,
}

impl GalleryIndex {
    pub fn new(dim: usize, ids: Vec<String>, labels: Vec<String>, data: Vec<f32>) -> Result<Self, RetrievalError> {
        let rows = data.len().checked_div(dim).unwrap_or(0);
        if dim == 0 || ids.len() != labels.len() || rows != ids.len() || rows * dim != data.len() {
            return Err(RetrievalError::Length {
                ids: ids.len(),
                labels: labels.len(),
                rows,
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(ids[bad / dim].clone()));
        }
        let sq_norms = data.chunks_exact(dim).map(|r| dot(r, r)).collect();
        Ok(GalleryIndex {
            dim,
            ids,
            labels,
            data,
            sq_norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sq_norm(&self, i: usize) -> f64 {
        self.sq_norms[i]
    }

    /// Squared distance from a query (with precomputed squared norm) to row `i`.
    #[inline]
    fn sq_distance(&self, q: &[f32], q_norm: f64, i: usize) -> f64 {
        (q_norm + self.sq_norms[i] - 2.0 * dot(q, self.row(i))).max(0.0)
    }

    /// Serialized `DRIX` form. Norms are not stored; they are recomputed on load.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4 + self.len() * 24);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for s in self.ids.iter().chain(&self.labels) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let n = usize::try_from(r.u64()?).map_err(|_| RetrievalError::Format("gallery too large".into()))?;
        let mut strings = |count: usize| -> Result<Vec<String>, RetrievalError> {
            (0..count)
                .map(|_| {
                    let len = r.u32()? as usize;
                    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| RetrievalError::Format("non-UTF-8 string".into()))
                })
                .collect()
        };
        let ids = strings(n)?;
        let labels = strings(n)?;
        let floats = n
            .checked_mul(dim)
            .ok_or_else(|| RetrievalError::Format("gallery too large".into()))?;
        let raw = r.take(floats * 4)?;
        if r.pos != bytes.len() {
            return Err(RetrievalError::Format("trailing bytes".into()));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if n == 0 {
            return Ok(GalleryIndex::empty(dim.max(1)));
        }
        GalleryIndex::new(dim, ids, labels, data)
    }

    pub fn empty(dim: usize) -> Self {
        GalleryIndex {
            dim,
            ids: Vec::new(),
            labels: Vec::new(),
            data: Vec::new(),
            sq_norms: Vec::new(),
        }
    }

    /// Writes through a `.partial` file and renames, so readers never see a
    /// half-written index.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let tmp = path.with_extension("partial");
        let io = |source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = std::fs::read(path).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RetrievalError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, RetrievalError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Embeds the given photos (corpus indices) with the photo branch.
pub fn build_index(
    model: &Model<f32>,
    corpus: &Corpus,
    store: &ImageStore,
    photos: &[usize],
    chunk: usize,
) -> Result<GalleryIndex, RetrievalError> {
    build_embeddings(model, corpus, store, Modality::Photo, photos, chunk)
}

/// Embeds records of either modality into the index layout. Sketch
/// embeddings stored this way serve as query files.
pub fn build_embeddings(
    model: &Model<f32>,
    corpus: &Corpus,
    store: &ImageStore,
    modality: Modality,
    indices: &[usize],
    chunk: usize,
) -> Result<GalleryIndex, RetrievalError> {
    let dim = model.encoder.embedding_dim;
    if indices.is_empty() {
        return Ok(GalleryIndex::empty(dim));
    }
    let branch = match modality {
        Modality::Photo => Branch::Photo,
        Modality::Sketch => Branch::Sketch,
    };
    let images = store.select(modality, indices);
    let rows = embed_parallel(model, branch, &images, chunk)?;
    let records = corpus.records(modality);
    let ids = indices.iter().map(|&i| records[i].id.clone()).collect();
    let labels = indices.iter().map(|&i| records[i].class.clone()).collect();
    GalleryIndex::new(dim, ids, labels, rows.concat())
}

/// Embeds images chunk by chunk, chunks spread over the thread budget.
pub fn embed_parallel(
    model: &Model<f32>,
    branch: Branch,
    images: &[&crate::imaging::Image],
    chunk: usize,
) -> Result<Vec<Vec<f32>>, EncoderError> {
    let chunk = chunk.max(1);
    let parts: Vec<&[&crate::imaging::Image]> = images.chunks(chunk).collect();
    let out = parallel::map_indexed(parts.len(), |i| model.embed_images(branch, parts[i], chunk));
    let mut rows = Vec::with_capacity(images.len());
    for part in out {
        rows.extend(part?);
    }
    Ok(rows)
}

/// Ranked gallery positions for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub indices: Vec<usize>,
    /// ℓ2 distances, non-decreasing.
    pub distances: Vec<f64>,
}

impl RankedResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Whether each ranked item shares the query's class.
    pub fn relevance(&self, index: &GalleryIndex, query_label: &str) -> Vec<bool> {
        self.indices.iter().map(|&i| index.labels()[i] == query_label).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    d: f64,
    i: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d.total_cmp(&other.d).then(self.i.cmp(&other.i))
    }
}

fn scan_shard(index: &GalleryIndex, q: &[f32], q_norm: f64, range: std::ops::Range<usize>, k: usize) -> Vec<Candidate> {
    if k >= range.len() {
        return range.map(|i| Candidate { d: index.sq_distance(q, q_norm, i), i }).collect();
    }
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for i in range {
        let c = Candidate {
            d: index.sq_distance(q, q_norm, i),
            i,
        };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().expect("k > 0") {
            heap.pop();
            heap.push(c);
        }
    }
    heap.into_vec()
}

fn shard_ranges(n: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let shards = shards.min(n).max(1);
    let base = n / shards;
    let extra = n % shards;
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = base + usize::from(s < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

fn rank(index: &GalleryIndex, q: &[f32], k: Option<usize>, shards: usize) -> RankedResult {
    let n = index.len();
    let k = k.unwrap_or(n).min(n);
    if k == 0 {
        return RankedResult {
            indices: Vec::new(),
            distances: Vec::new(),
        };
    }
    let q_norm = dot(q, q);
    let ranges = shard_ranges(n, shards);
    let parts = parallel::map_indexed(ranges.len(), |s| scan_shard(index, q, q_norm, ranges[s].clone(), k));
    let mut all: Vec<Candidate> = parts.into_iter().flatten().collect();
    all.sort_unstable();
    all.truncate(k);
    RankedResult {
        indices: all.iter().map(|c| c.i).collect(),
        distances: all.iter().map(|c| c.d.sqrt()).collect(),
    }
}

fn check_dim(index: &GalleryIndex, q: &[f32]) -> Result<(), RetrievalError> {
    if q.len() != index.dim() {
        return Err(RetrievalError::Dimension {
            expected: index.dim(),
            got: q.len(),
        });
    }
    Ok(())
}

/// Top-`k` (or full, when `k` is `None`) ranking of one query.
pub fn query(index: &GalleryIndex, embedding: &[f32], k: Option<usize>) -> Result<RankedResult, RetrievalError> {
    check_dim(index, embedding)?;
    Ok(rank(index, embedding, k, 1))
}

/// Ranks many queries, each scanning the gallery in `shards` partitions
/// whose partial top-k lists are merged. Results do not depend on `shards`.
pub fn batch_query<Q: AsRef<[f32]> + Sync>(
    index: &GalleryIndex,
    queries: &[Q],
    k: Option<usize>,
    shards: usize,
) -> Result<Vec<RankedResult>, RetrievalError> {
    if shards == 0 {
        return Err(RetrievalError::Shards);
    }
    for q in queries {
        check_dim(index, q.as_ref())?;
    }
    Ok(parallel::map_indexed(queries.len(), |i| rank(index, queries[i].as_ref(), k, shards)))
}

pub const RANKINGS_HEADER: &str = "query\tquery_class\trank\tgallery\tgallery_class\tdistance";

/// One row per ranked item, ranks starting at 1.
pub fn rankings_tsv(index: &GalleryIndex, query_ids: &[String], query_labels: &[String], results: &[RankedResult]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from(RANKINGS_HEADER);
    out.push('\n');
    for ((qid, ql), r) in query_ids.iter().zip(query_labels).zip(results) {
        for (rank, (&g, d)) in r.indices.iter().zip(&r.distances).enumerate() {
            writeln!(out, "{qid}\t{ql}\t{}\t{}\t{}\t{d}", rank + 1, index.ids()[g], index.labels()[g]).expect("string write");
        }
    }
    out
}
