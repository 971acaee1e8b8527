//! Procedural shape corpus with a controlled photo/sketch domain gap.
//!
//! A class is a shape family plus an aspect and a curvature variant. Photos
//! are filled shapes on textured backgrounds; sketches are jittered dark
//! outlines on white with varying stroke width and dropped segments.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Corpus, DataError, ImageSource, Modality, Record, SemanticTable};
use crate::imaging::Image;
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Triangle,
    Square,
    Diamond,
    Pentagon,
    Hexagon,
    Heptagon,
    Octagon,
    Circle,
    Star4,
    Star5,
    Star6,
    Cross,
    Arrow,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 13] = [
        ShapeFamily::Triangle,
        ShapeFamily::Square,
        ShapeFamily::Diamond,
        ShapeFamily::Pentagon,
        ShapeFamily::Hexagon,
        ShapeFamily::Heptagon,
        ShapeFamily::Octagon,
        ShapeFamily::Circle,
        ShapeFamily::Star4,
        ShapeFamily::Star5,
        ShapeFamily::Star6,
        ShapeFamily::Cross,
        ShapeFamily::Arrow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Square => "square",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Pentagon => "pentagon",
            ShapeFamily::Hexagon => "hexagon",
            ShapeFamily::Heptagon => "heptagon",
            ShapeFamily::Octagon => "octagon",
            ShapeFamily::Circle => "circle",
            ShapeFamily::Star4 => "star4",
            ShapeFamily::Star5 => "star5",
            ShapeFamily::Star6 => "star6",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Arrow => "arrow",
        }
    }

    /// Unit-radius outline, counter-clockwise.
    fn outline(self) -> Vec<(f64, f64)> {
        let regular = |n: usize, phase: f64| -> Vec<(f64, f64)> {
            (0..n)
                .map(|i| {
                    let t = phase + 2.0 * PI * i as f64 / n as f64;
                    (t.cos(), t.sin())
                })
                .collect()
        };
        let star = |k: usize| -> Vec<(f64, f64)> {
            (0..2 * k)
                .map(|i| {
                    let t = -PI / 2.0 + PI * i as f64 / k as f64;
                    let r = if i % 2 == 0 { 1.0 } else { 0.42 };
                    (r * t.cos(), r * t.sin())
                })
                .collect()
        };
        match self {
            ShapeFamily::Triangle => regular(3, -PI / 2.0),
            ShapeFamily::Square => regular(4, PI / 4.0),
            ShapeFamily::Diamond => regular(4, 0.0),
            ShapeFamily::Pentagon => regular(5, -PI / 2.0),
            ShapeFamily::Hexagon => regular(6, 0.0),
            ShapeFamily::Heptagon => regular(7, -PI / 2.0),
            ShapeFamily::Octagon => regular(8, PI / 8.0),
            ShapeFamily::Circle => regular(48, 0.0),
            ShapeFamily::Star4 => star(4),
            ShapeFamily::Star5 => star(5),
            ShapeFamily::Star6 => star(6),
            ShapeFamily::Cross => {
                let (a, b) = (0.3, 0.9);
                vec![
                    (a, -b),
                    (a, -a),
                    (b, -a),
                    (b, a),
                    (a, a),
                    (a, b),
                    (-a, b),
                    (-a, a),
                    (-b, a),
                    (-b, -a),
                    (-a, -a),
                    (-a, -b),
                ]
            }
            ShapeFamily::Arrow => vec![
                (0.95, 0.0),
                (0.15, 0.75),
                (0.15, 0.3),
                (-0.9, 0.3),
                (-0.9, -0.3),
                (0.15, -0.3),
                (0.15, -0.75),
            ],
        }
    }
}

/// One synthetic class.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub name: String,
    pub family: ShapeFamily,
    /// Width/height ratio.
    pub aspect: f64,
    /// Edge bulge; positive bows outward, negative pinches in.
    pub curvature: f64,
}

const ASPECTS: [(f64, &str); 3] = [(1.0, ""), (1.6, "wide"), (0.6, "tall")];
const CURVATURES: [(f64, &str); 3] = [(0.0, ""), (0.3, "bulged"), (-0.3, "pinched")];

impl SynthSpec {
    /// Every available class, variant-major: all plain families first, then
    /// the wide ones, and so on.
    pub fn catalogue() -> Vec<SynthSpec> {
        let mut out = Vec::new();
        for &(curvature, ctag) in &CURVATURES {
            for &(aspect, atag) in &ASPECTS {
                for family in ShapeFamily::ALL {
                    let name = match (family, atag, ctag) {
                        (ShapeFamily::Square, "wide", "") => "rectangle".to_string(),
                        (ShapeFamily::Circle, "wide", "") => "ellipse".to_string(),
                        _ => [family.name(), atag, ctag]
                            .iter()
                            .filter(|s| !s.is_empty())
                            .copied()
                            .collect::<Vec<_>>()
                            .join("-"),
                    };
                    out.push(SynthSpec {
                        name,
                        family,
                        aspect,
                        curvature,
                    });
                }
            }
        }
        out
    }

    /// Outline in unit coordinates before per-instance jitter.
    pub fn outline(&self) -> Vec<(f64, f64)> {
        let base = self.family.outline();
        let pts = if self.family == ShapeFamily::Circle {
            let n = base.len();
            (0..n)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / n as f64;
                    let r = 1.0 + 0.5 * self.curvature * (5.0 * t).cos();
                    (r * t.cos(), r * t.sin())
                })
                .collect()
        } else if self.curvature == 0.0 {
            base
        } else {
            bend_edges(&base, self.curvature)
        };
        let (sx, sy) = (self.aspect.sqrt(), 1.0 / self.aspect.sqrt());
        pts.into_iter().map(|(x, y)| (x * sx, y * sy)).collect()
    }
}

fn bend_edges(poly: &[(f64, f64)], curvature: f64) -> Vec<(f64, f64)> {
    const SUB: usize = 8;
    let mut out = Vec::with_capacity(poly.len() * SUB);
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len = (dx * dx + dy * dy).sqrt();
        // outward normal of a counter-clockwise polygon
        let (nx, ny) = (dy / len, -dx / len);
        for s in 0..SUB {
            let t = s as f64 / SUB as f64;
            let bulge = curvature * len * 4.0 * t * (1.0 - t) * 0.5;
            out.push((x0 + t * dx + bulge * nx, y0 + t * dy + bulge * ny));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub sketches_per_class: usize,
    pub photos_per_class: usize,
    pub image_size: usize,
    pub semantic_dim: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub const DEFAULT: SynthConfig = SynthConfig {
        n_classes: 20,
        sketches_per_class: 200,
        photos_per_class: 120,
        image_size: 64,
        semantic_dim: 300,
        seed: 0,
    };
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::DEFAULT
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Semantic vectors: a unit family direction plus half-weight aspect and
/// curvature directions and a little noise, so classes sharing a family sit
/// closer together than classes sharing only a variant.
fn semantics(specs: &[SynthSpec], dim: usize, seed: u64) -> Result<SemanticTable, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let polygon = gaussian_vec(&mut rng, dim);
    let starry = gaussian_vec(&mut rng, dim);
    let family: Vec<Vec<f64>> = ShapeFamily::ALL
        .iter()
        .map(|f| {
            let own = gaussian_vec(&mut rng, dim);
            let group = match f {
                ShapeFamily::Star4 | ShapeFamily::Star5 | ShapeFamily::Star6 => Some(&starry),
                ShapeFamily::Circle | ShapeFamily::Cross | ShapeFamily::Arrow => None,
                _ => Some(&polygon),
            };
            match group {
                Some(g) => own.iter().zip(g).map(|(a, b)| 0.8 * a + 0.4 * b).collect(),
                None => own,
            }
        })
        .collect();
    let aspect: Vec<Vec<f64>> = ASPECTS.iter().map(|_| gaussian_vec(&mut rng, dim)).collect();
    let curve: Vec<Vec<f64>> = CURVATURES.iter().map(|_| gaussian_vec(&mut rng, dim)).collect();
    let mut table = SemanticTable::new("synthetic", dim);
    for spec in specs {
        let f = ShapeFamily::ALL.iter().position(|&x| x == spec.family).expect("known family");
        let a = ASPECTS.iter().position(|&(v, _)| v == spec.aspect).expect("known aspect");
        let c = CURVATURES.iter().position(|&(v, _)| v == spec.curvature).expect("known curvature");
        let noise = gaussian_vec(&mut rng, dim);
        let v: Vec<f64> = (0..dim)
            .map(|i| family[f][i] + 0.5 * aspect[a][i] + 0.5 * curve[c][i] + 0.2 * noise[i])
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        table.insert(&spec.name, v.iter().map(|x| (x / n) as f32).collect())?;
    }
    Ok(table)
}

struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
}

impl Placement {
    fn draw(rng: &mut ChaCha8Rng, size: f64) -> Self {
        Placement {
            cx: size / 2.0 + rng.random_range(-0.08..0.08) * size,
            cy: size / 2.0 + rng.random_range(-0.08..0.08) * size,
            radius: rng.random_range(0.27..0.4) * size,
            rotation: rng.random_range(-0.25..0.25),
        }
    }

    fn apply(&self, pts: &[(f64, f64)], jitter: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
        let (s, c) = self.rotation.sin_cos();
        pts.iter()
            .map(|&(x, y)| {
                let jx: f64 = rng.sample::<f64, _>(StandardNormal) * jitter;
                let jy: f64 = rng.sample::<f64, _>(StandardNormal) * jitter;
                let (x, y) = (x + jx, y + jy);
                (self.cx + self.radius * (c * x - s * y), self.cy + self.radius * (s * x + c * y))
            })
            .collect()
    }
}

/// Even-odd scanline coverage sampled at pixel centres.
fn fill_mask(poly: &[(f64, f64)], size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let mut xs = Vec::new();
    for row in 0..size {
        let y = row as f64 + 0.5;
        xs.clear();
        for i in 0..poly.len() {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % poly.len()];
            if (y0 <= y) != (y1 <= y) {
                xs.push(x0 + (y - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).floor() + 1.0).clamp(0.0, size as f64) as usize;
            for col in start..end {
                mask[row * size + col] = true;
            }
        }
    }
    mask
}

fn render_photo(spec: &SynthSpec, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let place = Placement::draw(rng, size as f64);
    let poly = place.apply(&spec.outline(), 0.01, rng);
    let mask = fill_mask(&poly, size);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(150.0..235.0));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..120.0));
    let freq = rng.random_range(0.1..0.6);
    let angle: f64 = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (sa, ca) = angle.sin_cos();
    let mut pixels = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let inside = mask[row * size + col];
            let stripe = 18.0 * (freq * (ca * col as f64 + sa * row as f64) + phase).sin();
            for ch in 0..3 {
                let noise: f64 = rng.random_range(-20.0..20.0);
                let v = if inside {
                    fg[ch] + 0.3 * noise
                } else {
                    bg[ch] + stripe + noise
                };
                pixels.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(size, size, 3, pixels).expect("sized buffer")
}

fn render_sketch(spec: &SynthSpec, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let place = Placement::draw(rng, size as f64);
    let poly = place.apply(&spec.outline(), 0.035, rng);
    let width = rng.random_range(1.0..2.6);
    let ink = rng.random_range(0.0..70.0);
    let dropout = rng.random_range(0.0..0.15);
    let mut canvas = vec![255.0f64; size * size];
    let n = poly.len();
    // drop runs of the outline, not isolated sub-segments
    let run = (n / 12).max(1);
    let mut keep = true;
    for i in 0..n {
        if i % run == 0 {
            keep = rng.random::<f64>() >= dropout;
        }
        if !keep {
            continue;
        }
        stroke(&mut canvas, size, poly[i], poly[(i + 1) % n], width, ink);
    }
    Image::new(size, size, 1, canvas.into_iter().map(|v| v.round() as u8).collect()).expect("sized buffer")
}

fn stroke(canvas: &mut [f64], size: usize, a: (f64, f64), b: (f64, f64), width: f64, ink: f64) {
    let half = width / 2.0;
    let lo_x = (a.0.min(b.0) - half - 1.0).floor().max(0.0) as usize;
    let hi_x = ((a.0.max(b.0) + half + 1.0).ceil().max(0.0) as usize).min(size);
    let lo_y = (a.1.min(b.1) - half - 1.0).floor().max(0.0) as usize;
    let hi_y = ((a.1.max(b.1) + half + 1.0).ceil().max(0.0) as usize).min(size);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    for row in lo_y..hi_y {
        for col in lo_x..hi_x {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (ex, ey) = (px - a.0 - t * dx, py - a.1 - t * dy);
            let d = (ex * ex + ey * ey).sqrt();
            let cover = (half + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                let v = 255.0 + (ink - 255.0) * cover;
                let cell = &mut canvas[row * size + col];
                *cell = cell.min(v);
            }
        }
    }
}

/// Generates an in-memory corpus and its semantic table.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(Corpus, SemanticTable), DataError> {
    let catalogue = SynthSpec::catalogue();
    if cfg.n_classes < 2 || cfg.n_classes > catalogue.len() {
        return Err(DataError::Parameter(format!(
            "n_classes must be in 2..={}, got {}",
            catalogue.len(),
            cfg.n_classes
        )));
    }
    if cfg.image_size < 8 {
        return Err(DataError::Parameter(format!("image_size {} is below 8", cfg.image_size)));
    }
    if cfg.semantic_dim == 0 {
        return Err(DataError::Parameter("semantic_dim must be positive".into()));
    }
    let specs = &catalogue[..cfg.n_classes];
    let table = semantics(specs, cfg.semantic_dim, cfg.seed)?;

    let render = |modality: Modality, per_class: usize| -> Vec<Record> {
        let offset = match modality {
            Modality::Photo => 0,
            Modality::Sketch => specs.len() * cfg.photos_per_class,
        };
        parallel::map_indexed(specs.len() * per_class, |i| {
            let spec = &specs[i / per_class];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((offset + i) as u64);
            let image = match modality {
                Modality::Photo => render_photo(spec, cfg.image_size, &mut rng),
                Modality::Sketch => render_sketch(spec, cfg.image_size, &mut rng),
            };
            Record {
                id: format!("{}-{}-{:04}", modality, spec.name, i % per_class),
                source: ImageSource::Memory(Arc::new(image)),
                class: spec.name.clone(),
            }
        })
    };
    let photos = render(Modality::Photo, cfg.photos_per_class);
    let sketches = render(Modality::Sketch, cfg.sketches_per_class);
    Ok((Corpus::new(photos, sketches)?, table))
}
