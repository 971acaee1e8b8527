//! Class word vectors in the plain-text `token v1 ... vD` format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use super::DataError;

/// Class name to semantic vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTable {
    vectors: BTreeMap<String, Vec<f32>>,
    source: String,
    dim: usize,
}

impl SemanticTable {
    pub fn new(source: impl Into<String>, dim: usize) -> Self {
        SemanticTable {
            vectors: BTreeMap::new(),
            source: source.into(),
            dim,
        }
    }

    /// Rejects vectors of the wrong length, with non-finite entries or zero norm.
    pub fn insert(&mut self, class: &str, vector: Vec<f32>) -> Result<(), DataError> {
        if vector.len() != self.dim {
            return Err(DataError::InvalidSemantics(format!(
                "{class} (length {} but table dimension is {})",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) || vector.iter().all(|&v| v == 0.0) {
            return Err(DataError::InvalidSemantics(class.to_string()));
        }
        self.vectors.insert(class.to_string(), vector);
        Ok(())
    }

    pub fn get(&self, class: &str) -> Option<&[f32]> {
        self.vectors.get(class).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        Some(cosine(self.get(a)?, self.get(b)?))
    }
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn separator_variants(class: &str) -> Vec<String> {
    let mut out = Vec::new();
    for sep in ['_', '-', ' '] {
        let v: String = class
            .chars()
            .map(|c| if matches!(c, '_' | '-' | ' ') { sep } else { c })
            .collect();
        if v != class && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn tokens(class: &str) -> Vec<&str> {
    class.split(['_', '-', ' ']).filter(|t| !t.is_empty()).collect()
}

/// Reads vectors for `classes` from a word-vector stream.
///
/// Every line's component count is checked, but floats are only parsed for
/// tokens some class could resolve to. A class resolves to its exact token,
/// then to a separator variant (`_`, `-`, space), then to the mean of its
/// tokens' vectors.
pub fn parse_word_vectors<R: BufRead>(
    reader: R,
    classes: &[String],
    dim: usize,
    source: &str,
) -> Result<SemanticTable, DataError> {
    let mut wanted: HashSet<String> = HashSet::new();
    for c in classes {
        wanted.insert(c.clone());
        wanted.extend(separator_variants(c));
        wanted.extend(tokens(c).into_iter().map(str::to_string));
    }
    let mut found: HashMap<String, Vec<f32>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(source, e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or("");
        let rest: Vec<&str> = fields.filter(|f| !f.is_empty()).collect();
        if i == 0 && rest.len() == 1 && token.parse::<u64>().is_ok() {
            if let Ok(d) = rest[0].parse::<usize>() {
                if d != dim {
                    return Err(DataError::MalformedVector {
                        line: 1,
                        expected: dim,
                        found: d,
                    });
                }
                continue;
            }
        }
        if rest.len() != dim {
            return Err(DataError::MalformedVector {
                line: i + 1,
                expected: dim,
                found: rest.len(),
            });
        }
        if wanted.contains(token) && !found.contains_key(token) {
            let v: Result<Vec<f32>, _> = rest.iter().map(|f| f.parse::<f32>()).collect();
            let v = v.map_err(|e| DataError::MalformedLine {
                path: source.to_string(),
                line: i + 1,
                msg: format!("bad float: {e}"),
            })?;
            found.insert(token.to_string(), v);
        }
    }

    let mut table = SemanticTable::new(source, dim);
    let mut missing = Vec::new();
    for c in classes {
        let direct = std::iter::once(c.clone())
            .chain(separator_variants(c))
            .find_map(|k| found.get(&k).cloned());
        let vector = direct.or_else(|| {
            let toks = tokens(c);
            if toks.len() < 2 {
                return None;
            }
            let vs: Option<Vec<&Vec<f32>>> = toks.iter().map(|t| found.get(*t)).collect();
            let vs = vs?;
            let mut mean = vec![0.0f32; dim];
            for v in &vs {
                for (m, x) in mean.iter_mut().zip(v.iter()) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= vs.len() as f32);
            Some(mean)
        });
        match vector {
            Some(v) => table.insert(c, v)?,
            None => missing.push(c.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MissingSemantics(missing));
    }
    Ok(table)
}

pub fn load_word_vectors(path: &Path, classes: &[String], dim: usize) -> Result<SemanticTable, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_word_vectors(std::io::BufReader::new(file), classes, dim, &path.display().to_string())
}

/// Writes a table with a `count dim` header line.
pub fn write_word_vectors(table: &SemanticTable, path: &Path) -> Result<(), DataError> {
    let mut out = format!("{} {}\n", table.len(), table.dim());
    for (class, v) in table.iter() {
        out.push_str(class);
        for x in v {
            write!(out, " {x}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(token: &str, v: &[f32]) -> String {
        let mut s = token.to_string();
        for x in v {
            s.push_str(&format!(" {x}"));
        }
        s.push('\n');
        s
    }

    fn classes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn reads_300_components() {
        let v: Vec<f32> = (0..300).map(|i| 0.1 + i as f32 * 0.001).collect();
        let t = parse_word_vectors(line("cat", &v).as_bytes(), &classes(&["cat"]), 300, "w").unwrap();
        assert_eq!(t.get("cat").unwrap(), v.as_slice());
    }

    #[test]
    fn multi_word_class_averages_tokens() {
        let flying = [1.0f32, 2.0, -3.0];
        let bird = [0.5f32, -1.0, 4.0];
        let text = line("flying", &flying) + &line("bird", &bird) + &line("dog", &[0.0, 0.0, 1.0]);
        let t = parse_word_vectors(text.as_bytes(), &classes(&["flying-bird"]), 3, "w").unwrap();
        let hand: Vec<f32> = flying.iter().zip(&bird).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(t.get("flying-bird").unwrap(), hand.as_slice());
    }

    #[test]
    fn separator_variant_beats_token_mean() {
        let text = line("teddy_bear", &[1.0, 0.0]) + &line("teddy", &[0.0, 1.0]) + &line("bear", &[0.0, 1.0]);
        let t = parse_word_vectors(text.as_bytes(), &classes(&["teddy-bear"]), 2, "w").unwrap();
        assert_eq!(t.get("teddy-bear").unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn header_is_skipped() {
        let text = "2 2\n".to_string() + &line("a", &[1.0, 0.0]) + &line("b", &[0.0, 1.0]);
        let t = parse_word_vectors(text.as_bytes(), &classes(&["a", "b"]), 2, "w").unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn wrong_count_is_reported_with_line() {
        let text = line("a", &[1.0, 0.0]) + "b 1.0\n";
        match parse_word_vectors(text.as_bytes(), &classes(&["a"]), 2, "w") {
            Err(DataError::MalformedVector { line, expected, found }) => assert_eq!((line, expected, found), (2, 2, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unresolvable_classes_are_listed() {
        let text = line("flying", &[1.0, 0.0]);
        match parse_word_vectors(text.as_bytes(), &classes(&["zebra", "flying-bird"]), 2, "w") {
            Err(DataError::MissingSemantics(v)) => assert_eq!(v, classes(&["zebra", "flying-bird"])),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_vector_rejected() {
        let mut t = SemanticTable::new("t", 2);
        assert!(t.insert("a", vec![0.0, 0.0]).is_err());
        assert!(t.insert("a", vec![f32::NAN, 1.0]).is_err());
        assert!(t.insert("a", vec![1.0]).is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = SemanticTable::new("x", 3);
        t.insert("circle", vec![0.25, -1.5, 3.0]).unwrap();
        t.insert("square", vec![1e-3, 2.0, 0.0]).unwrap();
        let path = dir.path().join("v.txt");
        write_word_vectors(&t, &path).unwrap();
        let back = load_word_vectors(&path, &classes(&["circle", "square"]), 3).unwrap();
        assert_eq!(back.get("circle"), t.get("circle"));
        assert_eq!(back.get("square"), t.get("square"));
    }
}
