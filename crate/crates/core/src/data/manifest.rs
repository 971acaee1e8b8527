//! Tab-separated corpus manifests: `modality  id  path  class`.
//!
//! Relative paths are resolved against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Corpus, DataError, ImageSource, Modality, Record};

pub const MANIFEST_HEADER: &str = "modality\tid\tpath\tclass";

pub fn load_manifest(path: &Path) -> Result<Corpus, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base, &path.display().to_string())
}

pub fn parse_manifest(text: &str, base: &Path, name: &str) -> Result<Corpus, DataError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim_end_matches('\r')).unwrap_or("");
    if header != MANIFEST_HEADER {
        return Err(DataError::Header {
            path: name.to_string(),
            expected: MANIFEST_HEADER.to_string(),
            found: header.to_string(),
        });
    }
    let mut photos = Vec::new();
    let mut sketches = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [tag, id, rel, class] = fields[..] else {
            return Err(DataError::MalformedLine {
                path: name.to_string(),
                line: i + 1,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        };
        let modality: Modality = tag.parse().map_err(|tag| DataError::UnknownModality { line: i + 1, tag })?;
        if id.is_empty() || class.is_empty() || rel.is_empty() {
            return Err(DataError::MalformedLine {
                path: name.to_string(),
                line: i + 1,
                msg: "empty field".into(),
            });
        }
        let record = Record {
            id: id.to_string(),
            source: ImageSource::File(base.join(rel)),
            class: class.to_string(),
        };
        match modality {
            Modality::Photo => photos.push(record),
            Modality::Sketch => sketches.push(record),
        }
    }
    Corpus::new(photos, sketches)
}

/// Writes a manifest for a corpus whose records all live on disk.
pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<(), DataError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for modality in [Modality::Photo, Modality::Sketch] {
        for r in corpus.records(modality) {
            let ImageSource::File(p) = &r.source else {
                return Err(DataError::Parameter(format!(
                    "record {:?} is held in memory; use save_corpus",
                    r.id
                )));
            };
            let rel = p.strip_prefix(base).unwrap_or(p);
            writeln!(out, "{}\t{}\t{}\t{}", modality, r.id, rel.display(), r.class).expect("string write");
        }
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Writes every in-memory image as PNG under `dir/images/<modality>/` and a
/// `manifest.tsv` pointing at them. Returns the on-disk corpus.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<Corpus, DataError> {
    let mut out: [Vec<Record>; 2] = [Vec::new(), Vec::new()];
    for (slot, modality) in [Modality::Photo, Modality::Sketch].into_iter().enumerate() {
        let sub = dir.join("images").join(modality.as_str());
        std::fs::create_dir_all(&sub).map_err(|e| DataError::io(&sub, e))?;
        for r in corpus.records(modality) {
            let source = match &r.source {
                ImageSource::File(p) => ImageSource::File(p.clone()),
                ImageSource::Memory(im) => {
                    let p: PathBuf = sub.join(format!("{}.png", r.id));
                    im.save_png(&p).map_err(|source| DataError::Image { id: r.id.clone(), source })?;
                    ImageSource::File(p)
                }
            };
            out[slot].push(Record {
                id: r.id.clone(),
                source,
                class: r.class.clone(),
            });
        }
    }
    let [photos, sketches] = out;
    let saved = Corpus::new(photos, sketches)?;
    write_manifest(&saved, &dir.join("manifest.tsv"))?;
    Ok(saved)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_manifest() {
        let text = format!("{MANIFEST_HEADER}\nphoto\tp1\timg/p1.png\tcat\nsketch\ts1\timg/s1.png\tcat\n");
        let c = parse_manifest(&text, Path::new("/data"), "m.tsv").unwrap();
        assert_eq!(c.photos().len(), 1);
        assert_eq!(c.sketches().len(), 1);
        assert_eq!(c.classes(), &["cat"]);
        assert_eq!(c.photos()[0].source, ImageSource::File(PathBuf::from("/data/img/p1.png")));
    }

    #[test]
    fn distinct_errors() {
        let bad_tag = format!("{MANIFEST_HEADER}\nvideo\tv1\tx.png\tcat\n");
        assert!(matches!(
            parse_manifest(&bad_tag, Path::new("."), "m"),
            Err(DataError::UnknownModality { line: 2, .. })
        ));
        let dup = format!("{MANIFEST_HEADER}\nphoto\tp\ta.png\tcat\nphoto\tp\tb.png\tdog\n");
        assert!(matches!(parse_manifest(&dup, Path::new("."), "m"), Err(DataError::DuplicateId { .. })));
        assert!(matches!(
            load_manifest(Path::new("/definitely/not/here.tsv")),
            Err(DataError::MissingFile(_))
        ));
        assert!(matches!(parse_manifest("id\tpath\n", Path::new("."), "m"), Err(DataError::Header { .. })));
        let short = format!("{MANIFEST_HEADER}\nphoto\tp\ta.png\n");
        assert!(matches!(
            parse_manifest(&short, Path::new("."), "m"),
            Err(DataError::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |id: &str, class: &str| Record {
            id: id.into(),
            source: ImageSource::File(dir.path().join("images").join(format!("{id}.png"))),
            class: class.into(),
        };
        let c = Corpus::new(
            vec![rec("p1", "cat"), rec("p2", "flying-bird")],
            vec![rec("s1", "flying-bird")],
        )
        .unwrap();
        let path = dir.path().join("manifest.tsv");
        write_manifest(&c, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), c);
    }
}
