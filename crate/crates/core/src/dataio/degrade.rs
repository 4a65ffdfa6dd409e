use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Image;
use crate::error::{Error, Result};

/// Symmetric (half-sample) mirror: `... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...`.
pub fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlurKernel {
    Gaussian { sigma: f64 },
    Box { width: usize },
    Delta,
}

impl BlurKernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BlurKernel::Gaussian { sigma }
                if sigma.is_nan() || sigma <= 0.0 || sigma.is_infinite() =>
            {
                Err(Error::Config(format!(
                    "gaussian sigma must be positive, got {sigma}"
                )))
            }
            BlurKernel::Box { width } if width % 2 == 0 => {
                Err(Error::Config(format!("box width must be odd, got {width}")))
            }
            _ => Ok(()),
        }
    }

    /// Normalized separable 1-D taps, centred.
    pub fn taps(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let taps = match *self {
            BlurKernel::Gaussian { sigma } => {
                let r = (3.0 * sigma).ceil() as isize;
                let raw: Vec<f64> = (-r..=r)
                    .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
                    .collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            }
            BlurKernel::Box { width } => vec![1.0 / width as f64; width],
            BlurKernel::Delta => vec![1.0],
        };
        Ok(taps)
    }

    /// Full 2-D kernel (outer product of the taps), row-major.
    pub fn kernel_2d(&self) -> Result<Vec<f64>> {
        let t = self.taps()?;
        Ok(t.iter()
            .flat_map(|a| t.iter().map(move |b| a * b))
            .collect())
    }
}

impl fmt::Display for BlurKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlurKernel::Gaussian { sigma } => write!(f, "gaussian({sigma})"),
            BlurKernel::Box { width } => write!(f, "box({width})"),
            BlurKernel::Delta => write!(f, "delta"),
        }
    }
}

impl FromStr for BlurKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognised blur kernel `{s}`"));
        if s == "delta" {
            return Ok(BlurKernel::Delta);
        }
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let arg = rest.strip_suffix(')').ok_or_else(bad)?;
        let k = match name {
            "gaussian" => BlurKernel::Gaussian {
                sigma: arg.parse().map_err(|_| bad())?,
            },
            "box" => BlurKernel::Box {
                width: arg.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        k.validate()?;
        Ok(k)
    }
}

/// How the degraded half of a pair was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degradation {
    Blur {
        kernel: BlurKernel,
        noise_sigma: f64,
        seed: u64,
    },
    Bicubic {
        scale: usize,
    },
}

impl Degradation {
    /// Ratio of target to input size.
    pub fn scale(&self) -> usize {
        match self {
            Degradation::Blur { .. } => 1,
            Degradation::Bicubic { scale } => *scale,
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::Blur {
                kernel,
                noise_sigma,
                seed,
            } => write!(f, "blur kernel={kernel} noise={noise_sigma} seed={seed}"),
            Degradation::Bicubic { scale } => write!(f, "bicubic scale={scale}"),
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts.next().unwrap_or_default();
        let mut fields = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad degradation field `{p}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("degradation `{s}` lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad `{k}` in `{s}`")))
        };
        match kind {
            "blur" => Ok(Degradation::Blur {
                kernel: get("kernel")?.parse()?,
                noise_sigma: num("noise")?,
                seed: get("seed")?
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed in `{s}`")))?,
            }),
            "bicubic" => Ok(Degradation::Bicubic {
                scale: get("scale")?
                    .parse()
                    .map_err(|_| Error::Config(format!("bad scale in `{s}`")))?,
            }),
            _ => Err(Error::Config(format!("unknown degradation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradedPair {
    pub input: Image,
    pub target: Image,
    pub meta: Degradation,
}

impl DegradedPair {
    pub fn new(input: Image, target: Image, meta: Degradation) -> Result<Self> {
        let s = meta.scale();
        if input.channels() != target.channels()
            || input.width() * s != target.width()
            || input.height() * s != target.height()
        {
            return Err(Error::Config(format!(
                "pair dims {}x{}x{} / {}x{}x{} inconsistent with scale {s}",
                input.width(),
                input.height(),
                input.channels(),
                target.width(),
                target.height(),
                target.channels()
            )));
        }
        Ok(Self {
            input,
            target,
            meta,
        })
    }

    pub fn scale(&self) -> usize {
        self.meta.scale()
    }
}

fn convolve_separable(img: &Image, taps: &[f64]) -> Image {
    let (w, h) = (img.width(), img.height());
    let r = (taps.len() / 2) as isize;
    let mut out = img.clone();
    let mut tmp = vec![0.0; w * h];
    for c in 0..img.channels() {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * src[y * w + mirror_index(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let dst = &mut out.data_mut()[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * tmp[mirror_index(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

/// Mirror-padded convolution with a normalized kernel.
pub fn blur(img: &Image, kernel: BlurKernel) -> Result<Image> {
    let taps = kernel.taps()?;
    Ok(convolve_separable(img, &taps))
}

/// Blurs `sharp`, adds Gaussian noise of standard deviation `noise_sigma`
/// and clamps to `[0, 1]`.
pub fn make_blur_pair(
    sharp: &Image,
    kernel: BlurKernel,
    noise_sigma: f64,
    seed: u64,
) -> Result<DegradedPair> {
    if noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let mut blurred = blur(sharp, kernel)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in blurred.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    DegradedPair::new(
        blurred.clamp01(),
        sharp.clone(),
        Degradation::Blur {
            kernel,
            noise_sigma,
            seed,
        },
    )
}

/// Bicubic (Catmull-Rom, a = -0.5) kernel.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized taps for each output sample along one axis. When shrinking,
/// the kernel is stretched by the scale factor so it also low-passes.
fn contributions(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = out_len as f64 / in_len as f64;
    let kscale = ratio.min(1.0);
    let support = 2.0 / kscale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / ratio - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| (mirror_index(j, in_len), cubic((j as f64 - center) * kscale)))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let s: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= s;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resampling with mirror boundaries.
pub fn resize_bicubic(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Config("resize target must be non-empty".into()));
    }
    let (w, h) = (img.width(), img.height());
    let cx = contributions(w, out_w);
    let cy = contributions(h, out_h);
    let mut data = Vec::with_capacity(out_w * out_h * img.channels());
    let mut tmp = vec![0.0; out_w * h];
    for c in 0..img.channels() {
        let src = img.plane(c);
        for y in 0..h {
            for (x, taps) in cx.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(j, wt)| wt * src[y * w + j]).sum();
            }
        }
        for taps in &cy {
            for x in 0..out_w {
                data.push(taps.iter().map(|&(j, wt)| wt * tmp[j * out_w + x]).sum());
            }
        }
    }
    Image::new(out_w, out_h, img.channels(), data)
}

pub fn bicubic_downsample(img: &Image, scale: usize) -> Result<Image> {
    if scale == 0 || !img.width().is_multiple_of(scale) || !img.height().is_multiple_of(scale) {
        return Err(Error::Config(format!(
            "{}x{} image is not divisible by scale {scale}",
            img.width(),
            img.height()
        )));
    }
    Ok(resize_bicubic(img, img.width() / scale, img.height() / scale)?.clamp01())
}

pub fn bicubic_upsample(img: &Image, scale: usize) -> Result<Image> {
    if scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    Ok(resize_bicubic(img, img.width() * scale, img.height() * scale)?.clamp01())
}

/// Low-resolution input by bicubic downsampling of `hr`.
pub fn make_sr_pair(hr: &Image, scale: usize) -> Result<DegradedPair> {
    DegradedPair::new(
        bicubic_downsample(hr, scale)?,
        hr.clone(),
        Degradation::Bicubic { scale },
    )
}

/// Top-left input-side offsets of `count` random `patch x patch` crops.
pub fn crop_offsets(
    w: usize,
    h: usize,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || patch > w || patch > h {
        return Err(Error::Config(format!(
            "patch {patch} does not fit a {w}x{h} input"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| (rng.gen_range(0..=w - patch), rng.gen_range(0..=h - patch)))
        .collect())
}

/// `count` co-located random crops; `patch` is measured on the input side
/// and the target crop is scaled accordingly.
pub fn sample_patches(
    pair: &DegradedPair,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<DegradedPair>> {
    let s = pair.scale();
    crop_offsets(pair.input.width(), pair.input.height(), patch, count, seed)?
        .into_iter()
        .map(|(x, y)| {
            DegradedPair::new(
                pair.input.crop(x, y, patch, patch)?,
                pair.target.crop(x * s, y * s, patch * s, patch * s)?,
                pair.meta,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..h)
            .flat_map(|_| (0..w).map(|x| 0.1 + 0.015 * x as f64))
            .collect();
        Image::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn mirror_is_half_sample_symmetric() {
        let idx: Vec<usize> = (-3..7).map(|i| mirror_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn delta_blur_is_identity() {
        let img = ramp(9, 4);
        let pair = make_blur_pair(&img, BlurKernel::Delta, 0.0, 0).unwrap();
        assert_eq!(pair.input, pair.target);
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        for sigma in [0.5, 1.5, 3.2] {
            let k = BlurKernel::Gaussian { sigma }.kernel_2d().unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_survives_blur_and_downsampling() {
        let img = Image::filled(12, 8, 3, 0.37).unwrap();
        for k in [
            BlurKernel::Gaussian { sigma: 1.5 },
            BlurKernel::Box { width: 5 },
        ] {
            let out = make_blur_pair(&img, k, 0.0, 0).unwrap().input;
            assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-9));
        }
        let down = bicubic_downsample(&img, 4).unwrap();
        assert_eq!((down.width(), down.height()), (3, 2));
        assert!(down.data().iter().all(|v| (v - 0.37).abs() < 1e-9));
    }

    #[test]
    fn kernel_validation() {
        assert!(blur(&ramp(4, 4), BlurKernel::Box { width: 4 }).is_err());
        assert!(blur(&ramp(4, 4), BlurKernel::Gaussian { sigma: -1.0 }).is_err());
        assert!(make_blur_pair(&ramp(4, 4), BlurKernel::Delta, -0.1, 0).is_err());
    }

    #[test]
    fn downsample_shape_and_divisibility() {
        let img = Image::filled(48, 48, 3, 0.2).unwrap();
        let d = bicubic_downsample(&img, 2).unwrap();
        assert_eq!((d.width(), d.height()), (24, 24));
        assert!(bicubic_downsample(&Image::filled(10, 9, 1, 0.0).unwrap(), 2).is_err());
    }

    #[test]
    fn ramp_downsamples_to_resampled_ramp() {
        // A linear function is reproduced exactly by a symmetric normalized
        // kernel, so interior samples equal the ramp at the source centre.
        let img = ramp(48, 8);
        for scale in [2usize, 4] {
            let d = bicubic_downsample(&img, scale).unwrap();
            let margin = 2 * scale;
            for x in 0..d.width() {
                let centre = (x as f64 + 0.5) * scale as f64 - 0.5;
                if centre < margin as f64 || centre > (img.width() - 1 - margin) as f64 {
                    continue;
                }
                let want = 0.1 + 0.015 * centre;
                for y in 0..d.height() {
                    assert!((d.get(0, y, x) - want).abs() < 1e-6, "x={x}");
                }
            }
        }
    }

    #[test]
    fn degradation_meta_round_trips() {
        for m in [
            Degradation::Blur {
                kernel: BlurKernel::Gaussian { sigma: 1.5 },
                noise_sigma: 0.01,
                seed: 9,
            },
            Degradation::Blur {
                kernel: BlurKernel::Box { width: 3 },
                noise_sigma: 0.0,
                seed: 0,
            },
            Degradation::Blur {
                kernel: BlurKernel::Delta,
                noise_sigma: 0.0,
                seed: 1,
            },
            Degradation::Bicubic { scale: 4 },
        ] {
            assert_eq!(m.to_string().parse::<Degradation>().unwrap(), m);
        }
        assert!("bicubic".parse::<Degradation>().is_err());
        assert!("sharpen x=1".parse::<Degradation>().is_err());
    }

    #[test]
    fn patches() {
        let hr = ramp(48, 48);
        let pair = make_sr_pair(&hr, 2).unwrap();
        let full = sample_patches(&pair, 24, 1, 3).unwrap();
        assert_eq!(full[0], pair);

        let a = sample_patches(&pair, 8, 5, 42).unwrap();
        assert_eq!(a, sample_patches(&pair, 8, 5, 42).unwrap());
        let offsets = crop_offsets(24, 24, 8, 5, 42).unwrap();
        for (p, &(x, y)) in a.iter().zip(&offsets) {
            assert_eq!(p.input, pair.input.crop(x, y, 8, 8).unwrap());
            assert_eq!(p.target, pair.target.crop(2 * x, 2 * y, 16, 16).unwrap());
        }
        assert!(offsets.iter().any(|&o| o != offsets[0]));
        assert!(sample_patches(&pair, 25, 1, 0).is_err());
    }
}
