use rand::Rng;

use super::ChannelStats;
use crate::autograd::Float;

/// Zero padding applied on each side before the random crop.
pub const PAD: usize = 4;

/// One sampled training augmentation: crop offsets into the padded image
/// and an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augmentation {
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
            flip: rng.random_bool(0.5),
        }
    }

    /// Crops the zero-padded image at the offsets, then flips.
    pub fn apply(&self, image: &[u8], [c, h, w]: [usize; 3]) -> Vec<u8> {
        let mut out = vec![0u8; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + self.dy) as isize - PAD as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + self.dx) as isize - PAD as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ox = if self.flip { w - 1 - x } else { x };
                    out[(ch * h + y) * w + ox] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
        out
    }
}

/// `(pixel / 255 - mean_c) / std_c`. A zero std leaves the centred value.
pub fn normalize<F: Float>(image: &[u8], [c, h, w]: [usize; 3], stats: &ChannelStats) -> Vec<F> {
    let plane = h * w;
    image
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            let std = if stats.std[ch] > 0.0 { stats.std[ch] } else { 1.0 };
            F::from_f64((v as f64 / 255.0 - stats.mean[ch]) / std)
        })
        .collect()
}

/// Pad-4 random crop, horizontal flip with probability 0.5, then
/// normalization.
pub fn augment_train<F: Float, R: Rng + ?Sized>(
    image: &[u8],
    dims: [usize; 3],
    rng: &mut R,
    stats: &ChannelStats,
) -> Vec<F> {
    let aug = Augmentation::sample(rng);
    normalize(&aug.apply(image, dims), dims, stats)
}
