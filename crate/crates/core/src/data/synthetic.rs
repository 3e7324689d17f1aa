use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetPair, Split};
use crate::error::Result;

/// Parameters of a generated image-classification problem. Each class has
/// a smooth random prototype; samples add a random translation and uniform
/// pixel noise. Useful for smoke runs when no real data is available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Half-width of the uniform pixel noise, in pixel units.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}
fn default_side() -> usize {
    32
}
fn default_noise() -> f64 {
    60.0
}

impl SyntheticSpec {
    pub fn new(classes: usize, train: usize, test: usize) -> Self {
        SyntheticSpec {
            classes,
            train,
            test,
            channels: default_channels(),
            side: default_side(),
            noise: default_noise(),
            seed: 0,
        }
    }
}

fn prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (c, s) = (spec.channels, spec.side);
    (0..spec.classes)
        .map(|_| {
            let waves: Vec<[f64; 4]> = (0..c * 2)
                .map(|_| {
                    [
                        rng.random_range(0.5..3.0),
                        rng.random_range(0.5..3.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(40.0..90.0),
                    ]
                })
                .collect();
            let mut img = vec![0.0; c * s * s];
            for ch in 0..c {
                let base = rng.random_range(70.0..185.0);
                for y in 0..s {
                    for x in 0..s {
                        let (u, v) = (x as f64 / s as f64, y as f64 / s as f64);
                        let mut val = base;
                        for [fx, fy, ph, amp] in &waves[ch * 2..ch * 2 + 2] {
                            val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin() / 2.0;
                        }
                        img[(ch * s + y) * s + x] = val;
                    }
                }
            }
            img
        })
        .collect()
}

fn draw(spec: &SyntheticSpec, protos: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng, split: Split) -> Result<Dataset> {
    let (c, s) = (spec.channels, spec.side);
    let mut images = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % spec.classes;
        let (dy, dx) = (rng.random_range(-2i64..=2), rng.random_range(-2i64..=2));
        for ch in 0..c {
            for row in 0..s {
                for col in 0..s {
                    let sy = (row as i64 + dy).clamp(0, s as i64 - 1) as usize;
                    let sx = (col as i64 + dx).clamp(0, s as i64 - 1) as usize;
                    let noise = if spec.noise > 0.0 { rng.random_range(-spec.noise..spec.noise) } else { 0.0 };
                    let v = protos[y][(ch * s + sy) * s + sx] + noise;
                    images.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(y as u8);
    }
    Dataset::new(images, labels, [c, s, s], spec.classes, split)
}

/// Generates a training and a test split from the same class prototypes.
pub fn synthetic_pair(spec: &SyntheticSpec) -> Result<DatasetPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = prototypes(spec, &mut rng);
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    test_rng.set_stream(2);
    let train = draw(spec, &protos, spec.train, &mut train_rng, Split::Train)?;
    let test = draw(spec, &protos, spec.test, &mut test_rng, Split::Test)?.with_stats(train.stats.clone());
    Ok(DatasetPair { train, test })
}
