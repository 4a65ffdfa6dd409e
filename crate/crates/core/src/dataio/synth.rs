//! Procedural "sharp" scenes: gradients, flat shapes, stripes and bars with
//! hard edges, so that blur and downsampling destroy recoverable detail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{make_blur_pair, make_sr_pair, BlurKernel, DegradedPair, Image};
use crate::error::Result;
use crate::wsgraph::derived_seed;

fn colour(rng: &mut ChaCha8Rng, channels: usize) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in c.iter_mut().take(channels) {
        *v = rng.gen_range(0.05..0.95);
    }
    if channels == 1 {
        [c[0]; 3]
    } else {
        c
    }
}

pub fn sharp_image(width: usize, height: usize, channels: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c0, c1) = (colour(&mut rng, channels), colour(&mut rng, channels));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let diag = ((width * width + height * height) as f64).sqrt();
    let plane = width * height;
    let mut data = vec![0.0; plane * channels];
    for y in 0..height {
        for x in 0..width {
            let t = (0.5 + (x as f64 * dx + y as f64 * dy) / diag).clamp(0.0, 1.0);
            for c in 0..channels {
                data[c * plane + y * width + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let shapes = rng.gen_range(4..9);
    for _ in 0..shapes {
        let col = colour(&mut rng, channels);
        let kind = rng.gen_range(0..4);
        let x0 = rng.gen_range(0..width) as f64;
        let y0 = rng.gen_range(0..height) as f64;
        let sw = rng.gen_range(2..=width.max(3) / 2) as f64;
        let sh = rng.gen_range(2..=height.max(3) / 2) as f64;
        let period = rng.gen_range(2..6) as f64;
        let bar = rng.gen_range(1..4) as f64;
        let vertical = rng.gen_bool(0.5);
        let inside = |x: f64, y: f64| -> bool {
            match kind {
                0 => x >= x0 && x < x0 + sw && y >= y0 && y < y0 + sh,
                1 => (x - x0).powi(2) + (y - y0).powi(2) <= (sw / 2.0).powi(2),
                2 => {
                    x >= x0 && x < x0 + sw && y >= y0 && y < y0 + sh && {
                        let u = if vertical { x - x0 } else { y - y0 };
                        (u / period).floor() as i64 % 2 == 0
                    }
                }
                _ => {
                    if vertical {
                        x >= x0 && x < x0 + bar
                    } else {
                        y >= y0 && y < y0 + bar
                    }
                }
            }
        };
        for y in 0..height {
            for x in 0..width {
                if inside(x as f64, y as f64) {
                    for c in 0..channels {
                        data[c * plane + y * width + x] = col[c];
                    }
                }
            }
        }
    }
    Image::new(width, height, channels, data)
}

/// `count` square colour scenes of side `size` paired with blurred copies.
pub fn deblur_pairs(
    count: usize,
    size: usize,
    kernel: BlurKernel,
    noise: f64,
    seed: u64,
) -> Result<Vec<DegradedPair>> {
    (0..count)
        .map(|i| {
            let s = derived_seed(seed, i as u64);
            make_blur_pair(&sharp_image(size, size, 3, s)?, kernel, noise, s ^ 0x5EED)
        })
        .collect()
}

/// `count` colour scenes of side `hr_size` paired with bicubic `1/scale` inputs.
pub fn sr_pairs(
    count: usize,
    hr_size: usize,
    scale: usize,
    seed: u64,
) -> Result<Vec<DegradedPair>> {
    (0..count)
        .map(|i| {
            make_sr_pair(
                &sharp_image(hr_size, hr_size, 3, derived_seed(seed, i as u64))?,
                scale,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = sharp_image(32, 32, 3, 4).unwrap();
        assert_eq!(a, sharp_image(32, 32, 3, 4).unwrap());
        assert_ne!(a, sharp_image(32, 32, 3, 5).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_pairs_differ_from_targets() {
        let pairs = deblur_pairs(3, 32, BlurKernel::Gaussian { sigma: 1.5 }, 0.0, 1).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert_ne!(p.input, p.target);
            assert!(p.input.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let sr = sr_pairs(2, 48, 2, 1).unwrap();
        assert_eq!(sr[0].input.width(), 24);
    }
}
