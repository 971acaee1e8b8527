//! Triplet sampling with semantically hard negatives.
//!
//! The anchor class is uniform. The negative class is drawn from a softmax
//! over cosine similarity of class vectors divided by a temperature, so
//! semantically close classes show up as negatives more often.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::vectors::cosine;
use super::{Corpus, DataError, Modality, SemanticTable};

pub const DEFAULT_TAU: f64 = 0.1;

/// Corpus indices of one batch of triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    /// Sketch indices.
    pub anchors: Vec<usize>,
    /// Photo indices, same class as the anchor.
    pub positives: Vec<usize>,
    /// Photo indices, different class.
    pub negatives: Vec<usize>,
    pub anchor_classes: Vec<usize>,
    pub negative_classes: Vec<usize>,
    /// Anchor-class semantic vector per triplet.
    pub semantics: Vec<Vec<f32>>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TripletSampler {
    /// Corpus class index of each sampling class.
    classes: Vec<usize>,
    sketches: Vec<Vec<usize>>,
    photos: Vec<Vec<usize>>,
    vectors: Vec<Vec<f32>>,
    /// Per anchor class: the candidate negative classes and their probabilities.
    negatives: Vec<(Vec<usize>, Vec<f64>)>,
    samplers: Vec<WeightedIndex<f64>>,
}

impl TripletSampler {
    /// Samples from the given sketch and photo pools (corpus indices). Every
    /// class with a sketch in the pool must also have a photo, and at least
    /// two classes are required. `tau` may be infinite (uniform negatives).
    pub fn new(
        corpus: &Corpus,
        sketch_pool: &[usize],
        photo_pool: &[usize],
        table: &SemanticTable,
        tau: f64,
    ) -> Result<Self, DataError> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(DataError::Parameter(format!("temperature must be positive, got {tau}")));
        }
        let n_all = corpus.classes().len();
        let mut sketches = vec![Vec::new(); n_all];
        let mut photos = vec![Vec::new(); n_all];
        for &i in sketch_pool {
            sketches[corpus.labels(Modality::Sketch)[i]].push(i);
        }
        for &i in photo_pool {
            photos[corpus.labels(Modality::Photo)[i]].push(i);
        }
        let classes: Vec<usize> = (0..n_all).filter(|&c| !sketches[c].is_empty()).collect();
        for &c in &classes {
            if photos[c].is_empty() {
                return Err(DataError::EmptyClass {
                    class: corpus.classes()[c].clone(),
                    modality: Modality::Photo,
                });
            }
        }
        if classes.len() < 2 {
            return Err(DataError::InvalidSplit("triplet sampling needs at least two classes".into()));
        }
        let vectors: Vec<Vec<f32>> = classes
            .iter()
            .map(|&c| {
                let name = &corpus.classes()[c];
                table
                    .get(name)
                    .map(<[f32]>::to_vec)
                    .ok_or_else(|| DataError::MissingSemantics(vec![name.clone()]))
            })
            .collect::<Result<_, _>>()?;

        let mut negatives = Vec::with_capacity(classes.len());
        let mut samplers = Vec::with_capacity(classes.len());
        for a in 0..classes.len() {
            let others: Vec<usize> = (0..classes.len()).filter(|&c| c != a).collect();
            let logits: Vec<f64> = others
                .iter()
                .map(|&c| {
                    if tau.is_infinite() {
                        0.0
                    } else {
                        cosine(&vectors[a], &vectors[c]) / tau
                    }
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            let probs: Vec<f64> = w.iter().map(|x| x / z).collect();
            samplers.push(WeightedIndex::new(&probs).map_err(|e| DataError::Parameter(e.to_string()))?);
            negatives.push((others, probs));
        }
        Ok(TripletSampler {
            sketches: classes.iter().map(|&c| std::mem::take(&mut sketches[c])).collect(),
            photos: classes.iter().map(|&c| std::mem::take(&mut photos[c])).collect(),
            classes,
            vectors,
            negatives,
            samplers,
        })
    }

    /// Corpus class indices that can be anchors.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// `(corpus class index, probability)` of each possible negative class
    /// for an anchor class, or `None` if that class is not sampled.
    pub fn negative_probabilities(&self, anchor_class: usize) -> Option<Vec<(usize, f64)>> {
        let a = self.classes.iter().position(|&c| c == anchor_class)?;
        let (others, probs) = &self.negatives[a];
        Some(others.iter().zip(probs).map(|(&c, &p)| (self.classes[c], p)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> TripletBatch {
        let mut batch = TripletBatch {
            anchors: Vec::with_capacity(n),
            positives: Vec::with_capacity(n),
            negatives: Vec::with_capacity(n),
            anchor_classes: Vec::with_capacity(n),
            negative_classes: Vec::with_capacity(n),
            semantics: Vec::with_capacity(n),
        };
        let pick = |pool: &[usize], rng: &mut R| pool[rng.random_range(0..pool.len())];
        for _ in 0..n {
            let a = rng.random_range(0..self.classes.len());
            let neg = self.negatives[a].0[self.samplers[a].sample(rng)];
            batch.anchors.push(pick(&self.sketches[a], rng));
            batch.positives.push(pick(&self.photos[a], rng));
            batch.negatives.push(pick(&self.photos[neg], rng));
            batch.anchor_classes.push(self.classes[a]);
            batch.negative_classes.push(self.classes[neg]);
            batch.semantics.push(self.vectors[a].clone());
        }
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::record;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(classes: &[&str]) -> Corpus {
        let mut photos = Vec::new();
        let mut sketches = Vec::new();
        for c in classes {
            for k in 0..3 {
                photos.push(record(&format!("p-{c}-{k}"), c));
                sketches.push(record(&format!("s-{c}-{k}"), c));
            }
        }
        Corpus::new(photos, sketches).unwrap()
    }

    fn all(c: &Corpus, m: Modality) -> Vec<usize> {
        (0..c.records(m).len()).collect()
    }

    /// Vectors with prescribed cosines to `a`: (a,b) = 0.9, (a,c) = 0.1.
    fn table() -> SemanticTable {
        let mut t = SemanticTable::new("t", 3);
        t.insert("a", vec![1.0, 0.0, 0.0]).unwrap();
        let s = (1.0f32 - 0.81).sqrt();
        t.insert("b", vec![0.9, s, 0.0]).unwrap();
        let s = (1.0f32 - 0.01).sqrt();
        t.insert("c", vec![0.1, 0.0, s]).unwrap();
        t
    }

    #[test]
    fn softmax_probability_oracle() {
        let c = corpus(&["a", "b", "c"]);
        let s = TripletSampler::new(&c, &all(&c, Modality::Sketch), &all(&c, Modality::Photo), &table(), 1.0).unwrap();
        let p = s.negative_probabilities(0).unwrap();
        let want = 0.9f64.exp() / (0.9f64.exp() + 0.1f64.exp());
        assert_eq!(p[0].0, 1);
        assert!((p[0].1 - want).abs() < 1e-6, "{} vs {want}", p[0].1);
        assert!((want - 0.690).abs() < 1e-3);
    }

    #[test]
    fn two_classes_force_the_negative() {
        let c = corpus(&["a", "b"]);
        let s = TripletSampler::new(&c, &all(&c, Modality::Sketch), &all(&c, Modality::Photo), &table(), 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = s.sample(200, &mut rng);
        for i in 0..b.len() {
            assert_eq!(b.negative_classes[i], 1 - b.anchor_classes[i]);
        }
    }

    #[test]
    fn infinite_tau_is_uniform() {
        let c = corpus(&["a", "b", "c"]);
        let s = TripletSampler::new(&c, &all(&c, Modality::Sketch), &all(&c, Modality::Photo), &table(), f64::INFINITY)
            .unwrap();
        for (_, p) in s.negative_probabilities(0).unwrap() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_fields_are_consistent() {
        let c = corpus(&["a", "b", "c"]);
        let t = table();
        let s = TripletSampler::new(&c, &all(&c, Modality::Sketch), &all(&c, Modality::Photo), &t, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = s.sample(64, &mut rng);
        for i in 0..b.len() {
            let a = b.anchor_classes[i];
            assert_eq!(c.labels(Modality::Sketch)[b.anchors[i]], a);
            assert_eq!(c.labels(Modality::Photo)[b.positives[i]], a);
            assert_eq!(c.labels(Modality::Photo)[b.negatives[i]], b.negative_classes[i]);
            assert_ne!(a, b.negative_classes[i]);
            assert_eq!(b.semantics[i], t.get(&c.classes()[a]).unwrap());
        }
    }

    #[test]
    fn pool_without_photos_is_rejected() {
        let c = corpus(&["a", "b", "c"]);
        let photos: Vec<usize> = all(&c, Modality::Photo).into_iter().filter(|&i| c.labels(Modality::Photo)[i] != 2).collect();
        assert!(matches!(
            TripletSampler::new(&c, &all(&c, Modality::Sketch), &photos, &table(), 0.1),
            Err(DataError::EmptyClass { .. })
        ));
        assert!(TripletSampler::new(&c, &all(&c, Modality::Sketch), &all(&c, Modality::Photo), &table(), 0.0).is_err());
    }
}
