//! Ranking, domain and semantic losses and their weighted sum.
//!
//! All losses consume `[N, D]` embedding variables already on a graph:
//! anchors come from the sketch network, positives and negatives from the
//! photo network.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Real, Tensor, Var};
use crate::encoder::{BoundParams, EncoderError, Model};

pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_LAMBDA_S: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Domain-classifier logits are clamped to `±LOGIT_CLAMP` before the
/// cross-entropy.
pub const LOGIT_CLAMP: f64 = 15.0;
/// Added to cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

/// Domain targets: sketches are 0, photos are 1.
pub const SKETCH_TARGET: f64 = 0.0;
pub const PHOTO_TARGET: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid loss parameter: {0}")]
    Parameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_triplet: f64,
    pub alpha_domain: f64,
    pub alpha_semantic: f64,
    /// Triplet margin, must be positive.
    pub margin: f64,
    /// Gradient reversal strength on the negative's semantic term.
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_triplet: DEFAULT_ALPHA,
            alpha_domain: DEFAULT_ALPHA,
            alpha_semantic: DEFAULT_ALPHA,
            margin: DEFAULT_MARGIN,
            lambda_s: DEFAULT_LAMBDA_S,
        }
    }
}

impl LossWeights {
    pub fn triplet_only() -> Self {
        LossWeights {
            alpha_domain: 0.0,
            alpha_semantic: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let alphas = [self.alpha_triplet, self.alpha_domain, self.alpha_semantic];
        if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(LossError::Parameter(format!("loss weights must be non-negative, got {alphas:?}")));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(LossError::Parameter(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda_s.is_finite() && self.lambda_s >= 0.0) {
            return Err(LossError::Parameter(format!("lambda_s must be non-negative, got {}", self.lambda_s)));
        }
        Ok(())
    }
}

/// Embedding variables for one batch of triplets.
#[derive(Clone, Copy, Debug)]
pub struct TripletEmbeddings {
    pub anchors: Var,
    pub positives: Var,
    pub negatives: Var,
}

/// Graph handles of each loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub triplet: Var,
    pub domain: Var,
    pub semantic: Var,
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<(), LossError> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb || sa.len() != 2 || sa[0] == 0 {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        }
        .into());
    }
    Ok(())
}

fn batch_len<T: Real>(g: &Graph<T>, e: &TripletEmbeddings, op: &'static str) -> Result<usize, LossError> {
    same_shape(g, op, e.anchors, e.positives)?;
    same_shape(g, op, e.anchors, e.negatives)?;
    Ok(g.value(e.anchors).shape()[0])
}

/// Mean hinge `max(0, margin + |a - p| - |a - n|)` over the batch, with
/// Euclidean distances on the raw embeddings.
pub fn triplet_loss<T: Real>(g: &mut Graph<T>, e: &TripletEmbeddings, margin: T) -> Result<Var, LossError> {
    batch_len(g, e, "triplet_loss")?;
    if !(margin > T::zero()) {
        return Err(LossError::Parameter("margin must be positive".into()));
    }
    let dp = g.sub(e.anchors, e.positives)?;
    let dp = g.l2_norm(dp)?;
    let dn = g.sub(e.anchors, e.negatives)?;
    let dn = g.l2_norm(dn)?;
    let gap = g.sub(dp, dn)?;
    let gap = g.add_scalar(gap, margin)?;
    let hinge = g.max_with_zero(gap)?;
    Ok(g.mean(hinge)?)
}

/// Binary cross-entropy of the domain classifier over all `3N` embeddings,
/// each passed through a gradient reversal of strength `lambda_d`.
pub fn domain_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &BoundParams,
    e: &TripletEmbeddings,
    lambda_d: T,
) -> Result<Var, LossError> {
    let n = batch_len(g, e, "domain_loss")?;
    if !(lambda_d >= T::zero() && lambda_d <= T::one()) {
        return Err(LossError::Parameter(format!("lambda_d must lie in [0, 1], got {lambda_d:?}")));
    }
    let clamp = T::from_f64_lossy(LOGIT_CLAMP);
    let mut parts = Vec::with_capacity(3);
    for (emb, target) in [(e.anchors, SKETCH_TARGET), (e.positives, PHOTO_TARGET), (e.negatives, PHOTO_TARGET)] {
        let z = model.domain_logits(g, bound, emb, lambda_d)?;
        let targets = vec![T::from_f64_lossy(target); n];
        let l = g.bce_with_logits(z, &targets, clamp)?;
        parts.push(g.sum(l)?);
    }
    let s = g.add(parts[0], parts[1])?;
    let s = g.add(s, parts[2])?;
    Ok(g.scale(s, T::from_f64_lossy(1.0 / (3 * n) as f64))?)
}

/// Per-row cosine distance `0.5 * (1 - cos(decoded, target))`, returned
/// as an `[N]` variable.
pub fn cosine_distance<T: Real>(g: &mut Graph<T>, decoded: Var, target: Var) -> Result<Var, LossError> {
    same_shape(g, "cosine_distance", decoded, target)?;
    let dot = g.row_dot(decoded, target)?;
    let nd = g.l2_norm(decoded)?;
    let nt = g.l2_norm(target)?;
    let denom = g.mul(nd, nt)?;
    let denom = g.add_scalar(denom, T::from_f64_lossy(COSINE_EPS))?;
    let cos = g.div(dot, denom)?;
    let one_minus = g.scale(cos, -T::one())?;
    let one_minus = g.add_scalar(one_minus, T::one())?;
    Ok(g.scale(one_minus, T::from_f64_lossy(0.5))?)
}

/// Mean cosine reconstruction loss of the class word vector from anchor,
/// positive and negative embeddings. The negative enters the decoder
/// through a gradient reversal of strength `lambda_s`.
pub fn semantic_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &BoundParams,
    e: &TripletEmbeddings,
    semantics: Var,
    lambda_s: T,
) -> Result<Var, LossError> {
    let n = batch_len(g, e, "semantic_loss")?;
    let neg = g.grl(e.negatives, lambda_s)?;
    let mut parts = Vec::with_capacity(3);
    for emb in [e.anchors, e.positives, neg] {
        let decoded = model.semantic_decode(g, bound, emb)?;
        let d = cosine_distance(g, decoded, semantics)?;
        parts.push(g.sum(d)?);
    }
    let s = g.add(parts[0], parts[1])?;
    let s = g.add(s, parts[2])?;
    Ok(g.scale(s, T::from_f64_lossy(1.0 / (3 * n) as f64))?)
}

/// `alpha_t * L_t + alpha_d * L_d + alpha_s * L_s`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &BoundParams,
    e: &TripletEmbeddings,
    semantics: Var,
    weights: &LossWeights,
    lambda_d: T,
) -> Result<LossTerms, LossError> {
    weights.validate()?;
    let t = T::from_f64_lossy;
    let triplet = triplet_loss(g, e, t(weights.margin))?;
    let domain = domain_loss(g, model, bound, e, lambda_d)?;
    let semantic = semantic_loss(g, model, bound, e, semantics, t(weights.lambda_s))?;
    let wt = g.scale(triplet, t(weights.alpha_triplet))?;
    let wd = g.scale(domain, t(weights.alpha_domain))?;
    let ws = g.scale(semantic, t(weights.alpha_semantic))?;
    let total = g.add(wt, wd)?;
    let total = g.add(total, ws)?;
    Ok(LossTerms {
        total,
        triplet,
        domain,
        semantic,
    })
}

/// Puts `[N, dim]` semantic targets on the graph as a constant.
pub fn semantics_tensor<T: Real>(rows: &[&[f32]]) -> Result<Tensor<T>, LossError> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "semantics",
                lhs: vec![dim],
                rhs: vec![r.len()],
            }
            .into());
        }
        data.extend(r.iter().map(|&v| T::from_f64_lossy(f64::from(v))));
    }
    Ok(Tensor::new(vec![rows.len(), dim], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, HeadConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(g: &mut Graph<f64>, rows: &[&[f64]]) -> Var {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.param(Tensor::new(vec![rows.len(), d], data).unwrap())
    }

    fn emb(g: &mut Graph<f64>, a: &[&[f64]], p: &[&[f64]], n: &[&[f64]]) -> TripletEmbeddings {
        TripletEmbeddings {
            anchors: matrix(g, a),
            positives: matrix(g, p),
            negatives: matrix(g, n),
        }
    }

    fn tiny_model(d: usize, sem: usize) -> Model<f64> {
        Model::new(
            EncoderConfig {
                input_size: 4,
                channels: vec![2],
                embedding_dim: d,
                attention: false,
                share_weights: false,
                l2_normalize: false,
            },
            HeadConfig {
                domain_hidden: [4, 3],
                semantic_hidden: [4, 4],
                semantic_dim: sem,
            },
            77,
        )
        .unwrap()
    }

    #[test]
    fn triplet_equal_distances_gives_margin() {
        let mut g = Graph::new();
        let e = emb(&mut g, &[&[0.0, 0.0]], &[&[1.0, 2.0]], &[&[1.0, 2.0]]);
        let l = triplet_loss(&mut g, &e, 1.0).unwrap();
        assert_eq!(g.value(l).item(), Some(1.0));
    }

    #[test]
    fn triplet_satisfied_margin_gives_zero() {
        let mut g = Graph::new();
        let e = emb(&mut g, &[&[1.0, 1.0]], &[&[1.0, 1.0]], &[&[1.0, 3.0]]);
        let l = triplet_loss(&mut g, &e, 1.0).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
    }

    #[test]
    fn triplet_matches_per_sample_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..9).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let r: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mu = 1.0;
        let mut want = 0.0;
        for i in 0..3 {
            let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            want += f64::max(0.0, mu + d(r[i], r[3 + i]) - d(r[i], r[6 + i]));
        }
        want /= 3.0;
        let mut g = Graph::new();
        let e = emb(&mut g, &r[0..3], &r[3..6], &r[6..9]);
        let l = triplet_loss(&mut g, &e, mu).unwrap();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn triplet_rejects_bad_input() {
        let mut g = Graph::new();
        let e = emb(&mut g, &[&[0.0, 0.0]], &[&[1.0, 2.0, 3.0]], &[&[1.0, 2.0]]);
        assert!(triplet_loss(&mut g, &e, 1.0).is_err());
        let e = emb(&mut g, &[&[0.0]], &[&[1.0]], &[&[1.0]]);
        assert!(triplet_loss(&mut g, &e, 0.0).is_err());
    }

    #[test]
    fn cosine_distance_endpoints() {
        let s = [0.3, -1.0, 2.0];
        for (decoded, want) in [([0.6, -2.0, 4.0], 0.0), ([-0.3, 1.0, -2.0], 1.0), ([2.0, 0.6, 0.0], 0.5)] {
            let mut g = Graph::new();
            let d = matrix(&mut g, &[&decoded]);
            let t = matrix(&mut g, &[&s]);
            let c = cosine_distance(&mut g, d, t).unwrap();
            assert!((g.value(c).data()[0] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_of_zero_vector_is_finite() {
        let mut g = Graph::new();
        let d = matrix(&mut g, &[&[0.0, 0.0]]);
        let t = matrix(&mut g, &[&[1.0, 0.0]]);
        let c = cosine_distance(&mut g, d, t).unwrap();
        assert_eq!(g.value(c).data(), &[0.5]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(d).unwrap().all_finite());
    }

    #[test]
    fn domain_loss_at_symmetric_classifier_is_ln2() {
        let mut m = tiny_model(3, 5);
        for v in m.params.get_mut("domain.fc2.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let e = emb(&mut g, &[&[1.0, 2.0, 3.0]], &[&[-1.0, 0.5, 0.0]], &[&[4.0, 4.0, 4.0]]);
        let l = domain_loss(&mut g, &m, &b, &e, 0.3).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn domain_loss_matches_scalar_oracle() {
        let m = tiny_model(3, 5);
        let rows: [&[f64]; 6] = [
            &[0.5, -1.0, 2.0],
            &[1.5, 0.2, -0.3],
            &[-0.7, 0.9, 1.1],
            &[0.0, 0.4, -2.0],
            &[2.2, -0.1, 0.3],
            &[-1.2, -1.3, 0.8],
        ];
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let e = emb(&mut g, &rows[0..2], &rows[2..4], &rows[4..6]);
        let l = domain_loss(&mut g, &m, &b, &e, 1.0).unwrap();

        // oracle: evaluate the MLP by hand for each of the six embeddings
        let p = |name: &str| m.params.get(name).unwrap().data().to_vec();
        let layer = |x: &[f64], w: &[f64], bias: &[f64], relu: bool| -> Vec<f64> {
            let out = bias.len();
            (0..out)
                .map(|j| {
                    let v = bias[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>();
                    if relu { v.max(0.0) } else { v }
                })
                .collect()
        };
        let prob = |x: &[f64]| {
            let h = layer(x, &p("domain.fc0.weight"), &p("domain.fc0.bias"), true);
            let h = layer(&h, &p("domain.fc1.weight"), &p("domain.fc1.bias"), true);
            let z = layer(&h, &p("domain.fc2.weight"), &p("domain.fc2.bias"), false)[0];
            1.0 / (1.0 + (-z).exp())
        };
        let mut want = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let t = if i < 2 { 0.0 } else { 1.0 };
            let f = prob(row);
            want += t * f.ln() + (1.0 - t) * (1.0 - f).ln();
        }
        want *= -1.0 / 6.0;
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn domain_loss_near_zero_for_confident_classifier() {
        let mut m = tiny_model(1, 5);
        // logit = 40 * (e - 0.5) routed through relu units: photos at e=1, sketches at e=0
        m.params.get_mut("domain.fc0.weight").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        m.params.get_mut("domain.fc0.bias").unwrap().data_mut().fill(0.0);
        let w1 = m.params.get_mut("domain.fc1.weight").unwrap().data_mut();
        w1.fill(0.0);
        w1[0] = 1.0;
        m.params.get_mut("domain.fc1.bias").unwrap().data_mut().fill(0.0);
        let w2 = m.params.get_mut("domain.fc2.weight").unwrap().data_mut();
        w2.fill(0.0);
        w2[0] = 40.0;
        m.params.get_mut("domain.fc2.bias").unwrap().data_mut()[0] = -20.0;
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let e = emb(&mut g, &[&[0.0]], &[&[1.0]], &[&[1.0]]);
        let l = domain_loss(&mut g, &m, &b, &e, 0.0).unwrap();
        // logits clamp at ±15, so the loss is softplus(-15) ~ 3e-7
        assert!(g.value(l).item().unwrap() < 1e-6);
    }

    #[test]
    fn domain_loss_rejects_lambda_outside_unit_interval() {
        let m = tiny_model(1, 5);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let e = emb(&mut g, &[&[0.0]], &[&[1.0]], &[&[1.0]]);
        assert!(domain_loss(&mut g, &m, &b, &e, 1.5).is_err());
    }

    #[test]
    fn total_reduces_to_triplet_for_baseline_weights() {
        let m = tiny_model(3, 4);
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let e = emb(&mut g, &[&[0.1, 0.2, 0.3]], &[&[1.0, -1.0, 0.0]], &[&[0.2, 0.2, 0.2]]);
        let s = g.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, -1.0, 0.5]).unwrap());
        let terms = total_loss(&mut g, &m, &b, &e, s, &LossWeights::triplet_only(), 0.5).unwrap();
        assert_eq!(g.value(terms.total).item(), g.value(terms.triplet).item());

        let terms = total_loss(&mut g, &m, &b, &e, s, &LossWeights::default(), 0.5).unwrap();
        let sum = g.value(terms.triplet).item().unwrap()
            + g.value(terms.domain).item().unwrap()
            + g.value(terms.semantic).item().unwrap();
        assert!((g.value(terms.total).item().unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { margin: 0.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { alpha_domain: -1.0, ..LossWeights::default() }.validate().is_err());
    }
}
