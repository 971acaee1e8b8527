//! Binary checkpoint format.
//!
//! ```text
//! "DRCK"  u32 version (=1)  u32 count
//! count x { u32 name_len, name utf8, u32 rank, u32 dims[rank], f32 payload[prod(dims)] }
//! u32 config_len, config utf8 (key=value lines)
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{AttentionMask, EncoderConfig, EncoderError, HeadConfig, Model, ModelParams};
use crate::autodiff::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint(msg.into())
}

fn list(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(super) fn config_text(encoder: &EncoderConfig, heads: &HeadConfig) -> String {
    format!(
        "encoder.input_size={}\nencoder.channels={}\nencoder.embedding_dim={}\nencoder.attention={}\n\
         encoder.share_weights={}\nencoder.l2_normalize={}\nheads.domain_hidden={}\n\
         heads.semantic_hidden={}\nheads.semantic_dim={}\n",
        encoder.input_size,
        list(&encoder.channels),
        encoder.embedding_dim,
        encoder.attention,
        encoder.share_weights,
        encoder.l2_normalize,
        list(&heads.domain_hidden),
        list(&heads.semantic_hidden),
        heads.semantic_dim,
    )
}

fn parse_config(text: &str) -> Result<(EncoderConfig, HeadConfig), EncoderError> {
    let mut enc = EncoderConfig::default();
    let mut heads = HeadConfig::default();
    let num = |k: &str, v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad value for {k}: {v}")));
    let nums = |k: &str, v: &str| -> Result<Vec<usize>, EncoderError> { v.split(',').map(|x| num(k, x.trim())).collect() };
    let pair = |k: &str, v: &str| -> Result<[usize; 2], EncoderError> {
        nums(k, v)?.try_into().map_err(|_| bad(format!("{k} needs two widths")))
    };
    let flag = |k: &str, v: &str| v.parse::<bool>().map_err(|_| bad(format!("bad value for {k}: {v}")));
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed config line {line:?}")))?;
        match k {
            "encoder.input_size" => enc.input_size = num(k, v)?,
            "encoder.channels" => enc.channels = nums(k, v)?,
            "encoder.embedding_dim" => enc.embedding_dim = num(k, v)?,
            "encoder.attention" => enc.attention = flag(k, v)?,
            "encoder.share_weights" => enc.share_weights = flag(k, v)?,
            "encoder.l2_normalize" => enc.l2_normalize = flag(k, v)?,
            "heads.domain_hidden" => heads.domain_hidden = pair(k, v)?,
            "heads.semantic_hidden" => heads.semantic_hidden = pair(k, v)?,
            "heads.semantic_dim" => heads.semantic_dim = num(k, v)?,
            _ => return Err(bad(format!("unknown config key {k}"))),
        }
    }
    Ok((enc, heads))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), EncoderError> {
    let v = u32::try_from(v).map_err(|_| bad("value exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes parameters (as f32) and architecture.
pub fn write_checkpoint<T: Real>(model: &Model<T>) -> Result<Vec<u8>, EncoderError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let text = model.config_text();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String, EncoderError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }
}

/// Parses a checkpoint and checks its tensors against the architecture.
pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<Model<T>, EncoderError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u32()?;
    if version as u32 != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = cur.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name = cur.string()?;
        let rank = cur.u32()?;
        let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect();
        if !params.insert(name.clone(), Tensor::new(shape, data)?) {
            return Err(bad(format!("duplicate parameter {name}")));
        }
    }
    let text = cur.string()?;
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let (encoder, heads) = parse_config(&text)?;
    let template = Model::<T>::new(encoder.clone(), heads.clone(), 0)?;
    if template.params.len() != params.len() {
        return Err(bad(format!(
            "expected {} parameters, found {}",
            template.params.len(),
            params.len()
        )));
    }
    for (name, t) in template.params.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => return Err(bad(format!("{name} has shape {:?}, expected {:?}", p.shape(), t.shape()))),
            None => return Err(EncoderError::MissingParam(name.to_string())),
        }
    }
    Ok(Model {
        encoder,
        heads,
        params,
        mask: AttentionMask::Learned,
    })
}

/// Writes atomically: a temporary sibling is renamed over `path`.
pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<(), EncoderError> {
    let bytes = write_checkpoint(model)?;
    let tmp = path.with_extension("ckpt.partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>, EncoderError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f32> {
        let enc = EncoderConfig {
            input_size: 8,
            channels: vec![2, 3],
            embedding_dim: 4,
            attention: true,
            share_weights: false,
            l2_normalize: false,
        };
        let heads = HeadConfig {
            domain_hidden: [3, 2],
            semantic_hidden: [3, 3],
            semantic_dim: 5,
        };
        Model::new(enc, heads, 42).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let a = write_checkpoint(&m).unwrap();
        let back: Model<f32> = read_checkpoint(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_checkpoint(&back).unwrap(), a);
        assert_eq!(&a[..4], b"DRCK");
        assert_eq!(u32::from_le_bytes(a[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn config_block_is_readable() {
        let text = model().config_text();
        assert!(text.contains("encoder.channels=2,3\n"));
        assert!(text.contains("heads.semantic_dim=5\n"));
        assert_eq!(parse_config(&text).unwrap(), (model().encoder, model().heads));
    }

    #[test]
    fn rejects_corruption() {
        let a = write_checkpoint(&model()).unwrap();
        assert!(read_checkpoint::<f32>(&a[..a.len() - 3]).is_err());
        let mut b = a.clone();
        b[0] = b'X';
        assert!(read_checkpoint::<f32>(&b).is_err());
        let mut c = a;
        c.push(0);
        assert!(read_checkpoint::<f32>(&c).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &p).unwrap();
        assert_eq!(load_checkpoint::<f32>(&p).unwrap(), model());
    }
}
