//! Photo and sketch embedding networks with soft attention, plus the domain
//! classifier and semantic decoder heads.
//!
//! Each embedding network is a stack of blocks
//! `conv3x3 -> relu -> conv3x3 -> relu -> maxpool2`, an optional attention
//! block after the last stage, global average pooling and a linear
//! projection to the embedding size. The attention block computes a
//! one-channel mask with two 1×1 convolutions and a sigmoid and returns
//! `feature_map + feature_map * mask`.

mod checkpoint;
mod params;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Padding, Real, Tensor, Var};
use crate::imaging::{batch_tensor, Image};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{BoundParams, ModelParams};

pub const DEFAULT_INPUT_SIZE: usize = 64;
pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];
pub const DEFAULT_EMBEDDING_DIM: usize = 256;
pub const DEFAULT_DOMAIN_HIDDEN: [usize; 2] = [128, 64];
pub const DEFAULT_SEMANTIC_HIDDEN: [usize; 2] = [256, 256];
pub const DEFAULT_SEMANTIC_DIM: usize = 300;
pub const PHOTO_CHANNELS: usize = 3;
pub const SKETCH_CHANNELS: usize = 1;
const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input image {index} is {got_w}x{got_h}x{got_c}, expected {want}x{want}x{want_c}")]
    InputSize {
        index: usize,
        got_w: usize,
        got_h: usize,
        got_c: usize,
        want: usize,
        want_c: usize,
    },
    #[error("embedding has dimension {got}, expected {want}")]
    EmbeddingDim { got: usize, want: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Output width of each conv block.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub attention: bool,
    /// Photo and sketch branches use one parameter set.
    pub share_weights: bool,
    /// Project embeddings onto the unit sphere.
    pub l2_normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: DEFAULT_INPUT_SIZE,
            channels: DEFAULT_CHANNELS.to_vec(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            attention: true,
            share_weights: false,
            l2_normalize: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embedding_dim == 0 {
            return Err(EncoderError::Config("embedding_dim must be >= 1".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(EncoderError::Config("channels must be non-empty and positive".into()));
        }
        let factor = 1usize
            .checked_shl(self.channels.len() as u32)
            .ok_or_else(|| EncoderError::Config("too many blocks".into()))?;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(EncoderError::Config(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }

    fn last_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn attention_hidden(&self) -> usize {
        (self.last_channels() / 2).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub domain_hidden: [usize; 2],
    pub semantic_hidden: [usize; 2],
    pub semantic_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            domain_hidden: DEFAULT_DOMAIN_HIDDEN,
            semantic_hidden: DEFAULT_SEMANTIC_HIDDEN,
            semantic_dim: DEFAULT_SEMANTIC_DIM,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.domain_hidden.contains(&0) || self.semantic_hidden.contains(&0) || self.semantic_dim == 0 {
            return Err(EncoderError::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Which embedding network an input goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Photo,
    Sketch,
}

/// Source of the attention mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionMask {
    Learned,
    /// Every mask entry fixed to this value (ablation and tests).
    Fixed(f64),
}

/// The full parameter set: photo encoder, sketch encoder, domain classifier
/// and semantic decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub params: ModelParams<T>,
    pub mask: AttentionMask,
}

fn linear_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

impl<T: Real> Model<T> {
    pub fn new(encoder: EncoderConfig, heads: HeadConfig, seed: u64) -> Result<Self, EncoderError> {
        encoder.validate()?;
        heads.validate()?;
        let mut params = ModelParams::new();
        for prefix in Self::encoder_prefixes(&encoder) {
            let mut in_c = Self::branch_channels_for(&encoder, prefix);
            for (b, &out_c) in encoder.channels.iter().enumerate() {
                for j in 0..2 {
                    let (w, bias) = linear_names(&format!("{prefix}.block{b}.conv{j}"));
                    params.init_uniform(&w, &[out_c, in_c, 3, 3], in_c * 9, seed);
                    params.init_zeros(&bias, &[out_c]);
                    in_c = out_c;
                }
            }
            if encoder.attention {
                let c = encoder.last_channels();
                let hidden = encoder.attention_hidden();
                let (w0, b0) = linear_names(&format!("{prefix}.attention.conv0"));
                let (w1, b1) = linear_names(&format!("{prefix}.attention.conv1"));
                params.init_uniform(&w0, &[hidden, c, 1, 1], c, seed);
                params.init_zeros(&b0, &[hidden]);
                params.init_uniform(&w1, &[1, hidden, 1, 1], hidden, seed);
                params.init_zeros(&b1, &[1]);
            }
            let (w, b) = linear_names(&format!("{prefix}.proj"));
            params.init_uniform(&w, &[in_c, encoder.embedding_dim], in_c, seed);
            params.init_zeros(&b, &[encoder.embedding_dim]);
        }
        let d = encoder.embedding_dim;
        Self::init_mlp(&mut params, "domain", d, heads.domain_hidden, 1, seed);
        Self::init_mlp(&mut params, "semantic", d, heads.semantic_hidden, heads.semantic_dim, seed);
        Ok(Model {
            encoder,
            heads,
            params,
            mask: AttentionMask::Learned,
        })
    }

    fn init_mlp(params: &mut ModelParams<T>, prefix: &str, input: usize, hidden: [usize; 2], output: usize, seed: u64) {
        let widths = [input, hidden[0], hidden[1], output];
        for (i, pair) in widths.windows(2).enumerate() {
            let (w, b) = linear_names(&format!("{prefix}.fc{i}"));
            params.init_uniform(&w, &[pair[0], pair[1]], pair[0], seed);
            params.init_zeros(&b, &[pair[1]]);
        }
    }

    fn encoder_prefixes(config: &EncoderConfig) -> Vec<&'static str> {
        if config.share_weights {
            vec!["shared"]
        } else {
            vec!["photo", "sketch"]
        }
    }

    fn branch_channels_for(config: &EncoderConfig, prefix: &str) -> usize {
        if prefix == "sketch" && !config.share_weights {
            SKETCH_CHANNELS
        } else {
            PHOTO_CHANNELS
        }
    }

    fn prefix(&self, branch: Branch) -> &'static str {
        match (self.encoder.share_weights, branch) {
            (true, _) => "shared",
            (false, Branch::Photo) => "photo",
            (false, Branch::Sketch) => "sketch",
        }
    }

    /// Number of input planes the branch consumes. Sketches are replicated
    /// to three planes when weights are shared.
    pub fn input_channels(&self, branch: Branch) -> usize {
        Self::branch_channels_for(&self.encoder, self.prefix(branch))
    }

    pub fn with_mask(mut self, mask: AttentionMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        self.params.bind(graph, trainable)
    }

    /// Converts images into a `[N, C, S, S]` batch for `branch`.
    pub fn input_tensor(&self, branch: Branch, images: &[&Image]) -> Result<Tensor<T>, EncoderError> {
        let s = self.encoder.input_size;
        let want_c = match branch {
            Branch::Photo => PHOTO_CHANNELS,
            Branch::Sketch => SKETCH_CHANNELS,
        };
        for (index, im) in images.iter().enumerate() {
            // photos may be gray on disk; sketches may be stored as RGB
            if im.width != s || im.height != s {
                return Err(EncoderError::InputSize {
                    index,
                    got_w: im.width,
                    got_h: im.height,
                    got_c: im.channels,
                    want: s,
                    want_c,
                });
            }
        }
        Ok(batch_tensor(images, self.input_channels(branch)))
    }

    fn get(&self, bound: &BoundParams, name: &str) -> Result<Var, EncoderError> {
        bound.var(name).ok_or_else(|| EncoderError::MissingParam(name.to_string()))
    }

    fn linear(&self, g: &mut Graph<T>, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var, EncoderError> {
        let (w, b) = linear_names(prefix);
        let y = g.matmul(x, self.get(bound, &w)?)?;
        Ok(g.add_bias(y, self.get(bound, &b)?)?)
    }

    /// `feature_map + feature_map * mask` with a one-channel sigmoid mask
    /// from two 1×1 convolutions.
    pub fn attention_block(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        branch: Branch,
        feature_map: Var,
    ) -> Result<Var, EncoderError> {
        let shape = g.value(feature_map).shape().to_vec();
        let c = self.encoder.last_channels();
        if shape.len() != 4 || shape[1] != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "attention_block",
                lhs: shape,
                rhs: vec![c],
            }
            .into());
        }
        let mask = match self.mask {
            AttentionMask::Learned => {
                let p = self.prefix(branch);
                let (w0, b0) = linear_names(&format!("{p}.attention.conv0"));
                let (w1, b1) = linear_names(&format!("{p}.attention.conv1"));
                let h = g.conv2d(feature_map, self.get(bound, &w0)?, Some(self.get(bound, &b0)?), 1, Padding::Same)?;
                let h = g.relu(h)?;
                let logits = g.conv2d(h, self.get(bound, &w1)?, Some(self.get(bound, &b1)?), 1, Padding::Same)?;
                g.sigmoid(logits)?
            }
            AttentionMask::Fixed(v) => g.constant(Tensor::full(
                &[shape[0], 1, shape[2], shape[3]],
                T::from_f64_lossy(v),
            )),
        };
        let mask = g.broadcast_channels(mask, c)?;
        let weighted = g.mul(feature_map, mask)?;
        Ok(g.add(feature_map, weighted)?)
    }

    /// Feature map after the conv stages (and attention when enabled).
    pub fn feature_map(&self, g: &mut Graph<T>, bound: &BoundParams, branch: Branch, images: Var) -> Result<Var, EncoderError> {
        let shape = g.value(images).shape().to_vec();
        let (s, c) = (self.encoder.input_size, self.input_channels(branch));
        if shape.len() != 4 || shape[1] != c || shape[2] != s || shape[3] != s {
            return Err(AutodiffError::ShapeMismatch {
                op: "encoder input",
                lhs: shape,
                rhs: vec![0, c, s, s],
            }
            .into());
        }
        let p = self.prefix(branch);
        let mut x = images;
        for b in 0..self.encoder.channels.len() {
            for j in 0..2 {
                let (w, bias) = linear_names(&format!("{p}.block{b}.conv{j}"));
                x = g.conv2d(x, self.get(bound, &w)?, Some(self.get(bound, &bias)?), 1, Padding::Same)?;
                x = g.relu(x)?;
            }
            x = g.maxpool2(x)?;
        }
        if self.encoder.attention {
            x = self.attention_block(g, bound, branch, x)?;
        }
        Ok(x)
    }

    /// `[N, C, S, S]` images to `[N, D]` embeddings.
    pub fn embed(&self, g: &mut Graph<T>, bound: &BoundParams, branch: Branch, images: Var) -> Result<Var, EncoderError> {
        let x = self.feature_map(g, bound, branch, images)?;
        let pooled = g.global_avg_pool(x)?;
        let e = self.linear(g, bound, &format!("{}.proj", self.prefix(branch)), pooled)?;
        if self.encoder.l2_normalize {
            Ok(g.normalize_rows(e, T::from_f64_lossy(NORMALIZE_EPS))?)
        } else {
            Ok(e)
        }
    }

    pub fn embed_photo(&self, g: &mut Graph<T>, bound: &BoundParams, images: Var) -> Result<Var, EncoderError> {
        self.embed(g, bound, Branch::Photo, images)
    }

    pub fn embed_sketch(&self, g: &mut Graph<T>, bound: &BoundParams, images: Var) -> Result<Var, EncoderError> {
        self.embed(g, bound, Branch::Sketch, images)
    }

    fn check_embedding(&self, g: &Graph<T>, e: Var) -> Result<usize, EncoderError> {
        let s = g.value(e).shape();
        let d = self.encoder.embedding_dim;
        if s.len() != 2 || s[1] != d {
            return Err(EncoderError::EmbeddingDim {
                got: s.last().copied().unwrap_or(0),
                want: d,
            });
        }
        Ok(s[0])
    }

    fn mlp(&self, g: &mut Graph<T>, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var, EncoderError> {
        let h = self.linear(g, bound, &format!("{prefix}.fc0"), x)?;
        let h = g.relu(h)?;
        let h = self.linear(g, bound, &format!("{prefix}.fc1"), h)?;
        let h = g.relu(h)?;
        self.linear(g, bound, &format!("{prefix}.fc2"), h)
    }

    /// Domain classifier logits `[N]` for embeddings `[N, D]`, evaluated
    /// behind a gradient reversal of strength `lambda_d`.
    pub fn domain_logits(&self, g: &mut Graph<T>, bound: &BoundParams, e: Var, lambda_d: T) -> Result<Var, EncoderError> {
        let n = self.check_embedding(g, e)?;
        let r = g.grl(e, lambda_d)?;
        let z = self.mlp(g, bound, "domain", r)?;
        Ok(g.reshape(z, &[n])?)
    }

    /// Probability that each embedding came from a photo.
    pub fn domain_classify(&self, g: &mut Graph<T>, bound: &BoundParams, e: Var, lambda_d: T) -> Result<Var, EncoderError> {
        let z = self.domain_logits(g, bound, e, lambda_d)?;
        Ok(g.sigmoid(z)?)
    }

    /// Reconstructs `[N, semantic_dim]` word vectors from `[N, D]` embeddings.
    pub fn semantic_decode(&self, g: &mut Graph<T>, bound: &BoundParams, e: Var) -> Result<Var, EncoderError> {
        self.check_embedding(g, e)?;
        self.mlp(g, bound, "semantic", e)
    }

    /// Inference-only embedding of a set of images, processed in chunks.
    pub fn embed_images(&self, branch: Branch, images: &[&Image], chunk: usize) -> Result<Vec<Vec<T>>, EncoderError> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let x = g.constant(self.input_tensor(branch, part)?);
            let e = self.embed(&mut g, &bound, branch, x)?;
            let d = self.encoder.embedding_dim;
            out.extend(g.value(e).data().chunks_exact(d).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// Human-readable `key=value` description of the architecture.
    pub fn config_text(&self) -> String {
        checkpoint::config_text(&self.encoder, &self.heads)
    }
}
