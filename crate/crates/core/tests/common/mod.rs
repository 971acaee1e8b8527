#![allow(dead_code)]

use doodlerank::autodiff::{Graph, Padding, Tensor, Var};
use doodlerank::encoder::{BoundParams, EncoderConfig, HeadConfig, Model};
use doodlerank::objectives::{domain_loss, semantic_loss, total_loss, triplet_loss, LossWeights, TripletEmbeddings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_shaped(r: &mut ChaCha8Rng, shape: impl Fn(&mut ChaCha8Rng) -> Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let sh = shape(r);
    random(r, &sh, lo, hi)
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Reduces any tensor to a scalar through a fixed random weighting, so
/// every output element gets a distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut r = rng(seed ^ 0xabcd);
    let w = g.constant(random(&mut r, &shape, -1.0, 1.0));
    let prod = g.mul(y, w).unwrap();
    g.sum(prod).unwrap()
}

/// Central-difference gradient of a scalar function of several tensors.
pub fn numeric_grad(inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut values = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let up = f(&values);
            values[i].data_mut()[j] = orig - STEP;
            let down = f(&values);
            values[i].data_mut()[j] = orig;
            grad.push((up - down) / (2.0 * STEP));
        }
        out.push(grad);
    }
    out
}

fn analytic_grad<F>(inputs: &[Tensor<f64>], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.len()], |d| d.data().to_vec()))
        .collect()
}

fn forward<F>(values: &[Tensor<f64>], f: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item().unwrap()
}

fn worst_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], factor: f64) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| rel_error(a, factor * n))
        .fold(0.0, f64::max)
}

/// Largest relative error between the analytic gradient of `f` and central
/// differences, over every element of every input.
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let numeric = numeric_grad(inputs, |v| forward(v, &f));
    worst_error(&analytic_grad(inputs, &f), &numeric, 1.0)
}

/// Compares the analytic gradient of `f` with `factor` times the numeric
/// gradient of `oracle`.
pub fn scaled_grad_error<F, O>(inputs: &[Tensor<f64>], f: F, oracle: O, factor: f64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    O: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let numeric = numeric_grad(inputs, |v| forward(v, &oracle));
    worst_error(&analytic_grad(inputs, &f), &numeric, factor)
}

pub type OpCase = fn(&mut ChaCha8Rng, u64) -> f64;

fn elementwise_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.random_range(1..4), r.random_range(1..5)]
}

fn nchw(r: &mut ChaCha8Rng, even: bool) -> Vec<usize> {
    let side = |r: &mut ChaCha8Rng| if even { 2 * r.random_range(1..3) } else { r.random_range(2..5) };
    vec![r.random_range(1..3), r.random_range(1..3), side(r), side(r)]
}

fn unary(r: &mut ChaCha8Rng, seed: u64, x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let _ = r;
    max_grad_error(&[x], |g, v| {
        let y = op(g, v[0]);
        project(g, y, seed)
    })
}

fn binary(seed: u64, a: Tensor<f64>, b: Tensor<f64>, op: fn(&mut Graph<f64>, Var, Var) -> Var) -> f64 {
    max_grad_error(&[a, b], |g, v| {
        let y = op(g, v[0], v[1]);
        project(g, y, seed)
    })
}

/// Every differentiable primitive with a random-instance generator.
pub fn primitive_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |r, s| {
            let (m, k, n) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
            let a = random(r, &[m, k], -1.0, 1.0);
            let b = random(r, &[k, n], -1.0, 1.0);
            binary(s, a, b, |g, a, b| g.matmul(a, b).unwrap())
        }),
        ("conv2d", |r, s| {
            let shape = nchw(r, false);
            let out_c = r.random_range(1..3);
            let k = if r.random_bool(0.5) { 3 } else { 1 };
            let stride = r.random_range(1..3);
            let same = r.random_bool(0.5) || shape[2] < k || shape[3] < k;
            let x = random(r, &shape, -1.0, 1.0);
            let w = random(r, &[out_c, shape[1], k, k], -1.0, 1.0);
            let b = random(r, &[out_c], -1.0, 1.0);
            let padding = if same { Padding::Same } else { Padding::Valid };
            max_grad_error(&[x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, padding).unwrap();
                project(g, y, s)
            })
        }),
        ("relu", |r, s| {
            let x = { let sh = elementwise_shape(r); away_from_zero(r, &sh) };
            unary(r, s, x, |g, x| g.relu(x).unwrap())
        }),
        ("max_with_zero", |r, s| {
            let x = { let sh = elementwise_shape(r); away_from_zero(r, &sh) };
            unary(r, s, x, |g, x| g.max_with_zero(x).unwrap())
        }),
        ("sigmoid", |r, s| {
            let x = random_shaped(r, elementwise_shape, -4.0, 4.0);
            unary(r, s, x, |g, x| g.sigmoid(x).unwrap())
        }),
        ("log", |r, s| {
            let x = random_shaped(r, elementwise_shape, 0.2, 3.0);
            unary(r, s, x, |g, x| g.log(x).unwrap())
        }),
        ("add", |r, s| {
            let shape = elementwise_shape(r);
            let (a, b) = (random(r, &shape, -1.0, 1.0), random(r, &shape, -1.0, 1.0));
            binary(s, a, b, |g, a, b| g.add(a, b).unwrap())
        }),
        ("sub", |r, s| {
            let shape = elementwise_shape(r);
            let (a, b) = (random(r, &shape, -1.0, 1.0), random(r, &shape, -1.0, 1.0));
            binary(s, a, b, |g, a, b| g.sub(a, b).unwrap())
        }),
        ("mul", |r, s| {
            let shape = elementwise_shape(r);
            let (a, b) = (random(r, &shape, -1.0, 1.0), random(r, &shape, -1.0, 1.0));
            binary(s, a, b, |g, a, b| g.mul(a, b).unwrap())
        }),
        ("div", |r, s| {
            let shape = elementwise_shape(r);
            let a = random(r, &shape, -1.0, 1.0);
            let b = away_from_zero(r, &shape).map(|v| v + v.signum() * 0.5);
            binary(s, a, b, |g, a, b| g.div(a, b).unwrap())
        }),
        ("scale", |r, s| {
            let x = random_shaped(r, elementwise_shape, -1.0, 1.0);
            unary(r, s, x, |g, x| g.scale(x, -1.7).unwrap())
        }),
        ("add_scalar", |r, s| {
            let x = random_shaped(r, elementwise_shape, -1.0, 1.0);
            unary(r, s, x, |g, x| g.add_scalar(x, 0.3).unwrap())
        }),
        ("add_bias", |r, s| {
            let shape = elementwise_shape(r);
            let x = random(r, &shape, -1.0, 1.0);
            let b = random(r, &[shape[1]], -1.0, 1.0);
            binary(s, x, b, |g, x, b| g.add_bias(x, b).unwrap())
        }),
        ("sum", |r, s| {
            let x = random_shaped(r, elementwise_shape, -1.0, 1.0);
            unary(r, s, x, |g, x| g.sum(x).unwrap())
        }),
        ("mean", |r, s| {
            let x = random_shaped(r, elementwise_shape, -1.0, 1.0);
            unary(r, s, x, |g, x| g.mean(x).unwrap())
        }),
        ("l2_norm", |r, s| {
            let x = { let sh = elementwise_shape(r); away_from_zero(r, &sh) };
            unary(r, s, x, |g, x| g.l2_norm(x).unwrap())
        }),
        ("row_dot", |r, s| {
            let shape = elementwise_shape(r);
            let (a, b) = (random(r, &shape, -1.0, 1.0), random(r, &shape, -1.0, 1.0));
            binary(s, a, b, |g, a, b| g.row_dot(a, b).unwrap())
        }),
        ("grl", |r, s| {
            let x = random_shaped(r, elementwise_shape, -1.0, 1.0);
            let lambda = [0.0, 0.5, 1.0][r.random_range(0..3)];
            // backward must be -lambda times the gradient of the plain path
            scaled_grad_error(
                &[x],
                |g, v| {
                    let rev = g.grl(v[0], lambda).unwrap();
                    project(g, rev, s)
                },
                |g, v| project(g, v[0], s),
                -lambda,
            )
        }),
        ("maxpool2", |r, s| {
            let x = random_shaped(r, |r| nchw(r, true), -1.0, 1.0);
            unary(r, s, x, |g, x| g.maxpool2(x).unwrap())
        }),
        ("global_avg_pool", |r, s| {
            let x = random_shaped(r, |r| nchw(r, false), -1.0, 1.0);
            unary(r, s, x, |g, x| g.global_avg_pool(x).unwrap())
        }),
        ("broadcast_channels", |r, s| {
            let mut shape = nchw(r, false);
            shape[1] = 1;
            let c = r.random_range(1..4);
            let x = random(r, &shape, -1.0, 1.0);
            max_grad_error(&[x], |g, v| {
                let y = g.broadcast_channels(v[0], c).unwrap();
                project(g, y, s)
            })
        }),
        ("reshape", |r, s| {
            let shape = elementwise_shape(r);
            let x = random(r, &shape, -1.0, 1.0);
            max_grad_error(&[x], |g, v| {
                let y = g.reshape(v[0], &[shape[0] * shape[1]]).unwrap();
                project(g, y, s)
            })
        }),
        ("bce_with_logits", |r, s| {
            let n = r.random_range(1..6);
            let z = random(r, &[n], -5.0, 5.0);
            let t: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            max_grad_error(&[z], |g, v| {
                let y = g.bce_with_logits(v[0], &t, 15.0).unwrap();
                project(g, y, s)
            })
        }),
        ("normalize_rows", |r, s| {
            let x = { let sh = elementwise_shape(r); away_from_zero(r, &sh) };
            unary(r, s, x, |g, x| g.normalize_rows(x, 1e-8).unwrap())
        }),
    ]
}

pub fn toy_model(seed: u64) -> Model<f64> {
    let mut model = Model::new(
        EncoderConfig {
            input_size: 8,
            channels: vec![2, 3],
            embedding_dim: 8,
            attention: true,
            share_weights: false,
            l2_normalize: false,
        },
        HeadConfig {
            domain_hidden: [5, 4],
            semantic_hidden: [5, 5],
            semantic_dim: 6,
        },
        seed,
    )
    .unwrap();
    // zero-initialised biases would put pre-activations exactly on relu kinks
    let mut r = rng(seed ^ 0x5eed);
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        for v in model.params.get_mut(&name).unwrap().data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    model
}

pub struct ToyBatch {
    pub anchors: Tensor<f64>,
    pub positives: Tensor<f64>,
    pub negatives: Tensor<f64>,
    pub semantics: Tensor<f64>,
}

/// N=2 triplets of 8×8 images and class vectors.
pub fn toy_batch(seed: u64) -> ToyBatch {
    let mut r = rng(seed);
    ToyBatch {
        anchors: random(&mut r, &[2, 1, 8, 8], -1.0, 1.0),
        positives: random(&mut r, &[2, 3, 8, 8], -1.0, 1.0),
        negatives: random(&mut r, &[2, 3, 8, 8], -1.0, 1.0),
        semantics: random(&mut r, &[2, 6], -1.0, 1.0),
    }
}

const LAMBDA_S: f64 = 0.5;

fn toy_embeddings(g: &mut Graph<f64>, model: &Model<f64>, bound: &BoundParams, batch: &ToyBatch) -> TripletEmbeddings {
    let a = g.constant(batch.anchors.clone());
    let p = g.constant(batch.positives.clone());
    let n = g.constant(batch.negatives.clone());
    TripletEmbeddings {
        anchors: model.embed_sketch(g, bound, a).unwrap(),
        positives: model.embed_photo(g, bound, p).unwrap(),
        negatives: model.embed_photo(g, bound, n).unwrap(),
    }
}

fn weights() -> LossWeights {
    LossWeights {
        lambda_s: LAMBDA_S,
        ..LossWeights::default()
    }
}

fn toy_total(g: &mut Graph<f64>, model: &Model<f64>, bound: &BoundParams, batch: &ToyBatch, lambda_d: f64) -> Var {
    let e = toy_embeddings(g, model, bound, batch);
    let s = g.constant(batch.semantics.clone());
    total_loss(g, model, bound, &e, s, &weights(), lambda_d).unwrap().total
}

fn is_head(name: &str) -> bool {
    name.starts_with("domain.") || name.starts_with("semantic.")
}

/// Relative gradient error of the full weighted loss with respect to every
/// model parameter. Head parameters are checked against plain central
/// differences. Encoder parameters sit behind the reversal layers, so their
/// oracle chains central differences of each loss term with respect to the
/// embeddings (reversed terms scaled by `-lambda`) into central differences
/// of the embeddings with respect to the parameter.
pub fn total_loss_grad_error(seed: u64, lambda_d: f64) -> f64 {
    let mut model = toy_model(seed);
    let batch = toy_batch(seed + 1);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let loss = toy_total(&mut g, &model, &bound, &batch, lambda_d);
    g.backward(loss).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = bound
        .iter()
        .map(|(name, v)| (name.to_string(), g.grad(v).map(|t| t.data().to_vec()).unwrap_or_default()))
        .collect();

    // embeddings at the current parameters
    let mut g = Graph::new();
    let bound_c = model.bind(&mut g, false);
    let e = toy_embeddings(&mut g, &model, &bound_c, &batch);
    let emb: Vec<Tensor<f64>> = [e.anchors, e.positives, e.negatives].iter().map(|&v| g.value(v).clone()).collect();

    let term = |which: usize, values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let e = TripletEmbeddings {
            anchors: vars[0],
            positives: vars[1],
            negatives: vars[2],
        };
        let s = g.constant(batch.semantics.clone());
        let v = match which {
            0 => triplet_loss(&mut g, &e, 1.0).unwrap(),
            1 => domain_loss(&mut g, &model, &bound, &e, lambda_d).unwrap(),
            _ => semantic_loss(&mut g, &model, &bound, &e, s, LAMBDA_S).unwrap(),
        };
        g.value(v).item().unwrap()
    };
    let dt = numeric_grad(&emb, |v| term(0, v));
    let dd = numeric_grad(&emb, |v| term(1, v));
    let ds = numeric_grad(&emb, |v| term(2, v));
    let upstream: Vec<Tensor<f64>> = (0..3)
        .map(|k| {
            let s_factor = if k == 2 { -LAMBDA_S } else { 1.0 };
            let data = (0..emb[k].len())
                .map(|j| dt[k][j] - lambda_d * dd[k][j] + s_factor * ds[k][j])
                .collect();
            Tensor::new(emb[k].shape().to_vec(), data).unwrap()
        })
        .collect();

    let total = |model: &Model<f64>| -> f64 {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let loss = toy_total(&mut g, model, &bound, &batch, lambda_d);
        g.value(loss).item().unwrap()
    };
    let pulled_back = |model: &Model<f64>| -> f64 {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let e = toy_embeddings(&mut g, model, &bound, &batch);
        [e.anchors, e.positives, e.negatives]
            .iter()
            .zip(&upstream)
            .map(|(&v, u)| g.value(v).data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };

    let mut worst = 0.0f64;
    for (name, grad) in analytic {
        let f: &dyn Fn(&Model<f64>) -> f64 = if is_head(&name) { &total } else { &pulled_back };
        let len = model.params.get(&name).unwrap().len();
        for j in 0..len {
            let orig = model.params.get(&name).unwrap().data()[j];
            model.params.get_mut(&name).unwrap().data_mut()[j] = orig + STEP;
            let up = f(&model);
            model.params.get_mut(&name).unwrap().data_mut()[j] = orig - STEP;
            let down = f(&model);
            model.params.get_mut(&name).unwrap().data_mut()[j] = orig;
            let a = grad.get(j).copied().unwrap_or(0.0);
            worst = worst.max(rel_error(a, (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

pub const TRIALS: u64 = 100;

/// Runs every primitive `TRIALS` times and the total loss on a few seeds.
/// Returns the worst error seen per case.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, case) in primitive_cases() {
        let mut worst = 0.0f64;
        for trial in 0..TRIALS {
            let mut r = rng(trial * 7919 + name.len() as u64);
            worst = worst.max(case(&mut r, trial));
        }
        out.push((name.to_string(), worst));
    }
    let mut worst = 0.0f64;
    for seed in 0..3 {
        for lambda_d in [0.0, 0.5, 1.0] {
            worst = worst.max(total_loss_grad_error(seed, lambda_d));
        }
    }
    out.push(("total_loss".into(), worst));
    out
}
