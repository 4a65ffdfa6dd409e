//! Full-reference quality metrics on images in `[0, 1]`.

use std::fmt::Write as _;

use crate::dataio::Image;
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::shape(
            "metrics",
            format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                a.width(),
                a.height(),
                a.channels(),
                b.width(),
                b.height(),
                b.channels()
            ),
        ))
    }
}

/// `10 log10(peak^2 / MSE)` over all samples, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_dims(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimScore {
    pub value: f64,
    /// Image smaller than the window; scored from whole-image statistics.
    pub global_fallback: bool,
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            tmp[y * ow + ox] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * x[y * w + ox + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(oy + i) * ow + ox])
                .sum();
        }
    }
    out
}

fn ssim_formula(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), dynamic
/// range 1, averaged over window positions fully inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<SsimScore> {
    check_dims(a, b, "ssim")?;
    let (w, h) = (a.width(), a.height());
    let (la, lb) = (a.luma(), b.luma());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        let n = la.len() as f64;
        let mu_a = la.iter().sum::<f64>() / n;
        let mu_b = lb.iter().sum::<f64>() / n;
        let var_a = la.iter().map(|v| (v - mu_a).powi(2)).sum::<f64>() / n;
        let var_b = lb.iter().map(|v| (v - mu_b).powi(2)).sum::<f64>() / n;
        let cov = la
            .iter()
            .zip(&lb)
            .map(|(x, y)| (x - mu_a) * (y - mu_b))
            .sum::<f64>()
            / n;
        return Ok(SsimScore {
            value: ssim_formula(mu_a, mu_b, var_a, var_b, cov),
            global_fallback: true,
        });
    }
    let k = gaussian_window();
    let f = |x: &[f64]| filter_valid(x, w, h, &k);
    let sq = |x: &[f64]| x.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();
    let (mu_a, mu_b) = (f(&la), f(&lb));
    let (ea2, eb2, eab) = (f(&sq(&la)), f(&sq(&lb)), f(&prod));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let var_a = ea2[i] - mu_a[i] * mu_a[i];
            let var_b = eb2[i] - mu_b[i] * mu_b[i];
            let cov = eab[i] - mu_a[i] * mu_b[i];
            ssim_formula(mu_a[i], mu_b[i], var_a, var_b, cov)
        })
        .sum();
    Ok(SsimScore {
        value: total / n as f64,
        global_fallback: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Degraded input (bicubic-upsampled for SR) scored against the target.
    pub input_psnr: Option<f64>,
    pub input_ssim: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    fn mean_of(&self, f: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.rows.iter().map(f).collect();
        vals.filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean_of(|r| Some(r.psnr)).unwrap_or(f64::NAN)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean_of(|r| Some(r.ssim)).unwrap_or(f64::NAN)
    }

    pub fn mean_input_psnr(&self) -> Option<f64> {
        self.mean_of(|r| r.input_psnr)
    }

    pub fn mean_input_ssim(&self) -> Option<f64> {
        self.mean_of(|r| r.input_ssim)
    }

    /// `image,psnr_db,ssim,input_psnr_db,input_ssim,note` with a final `mean` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("image,psnr_db,ssim,input_psnr_db,input_ssim,note\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.6},{:.6},{},{},{}",
                r.name,
                r.psnr,
                r.ssim,
                opt(r.input_psnr),
                opt(r.input_ssim),
                r.note
            )
            .unwrap();
        }
        writeln!(
            s,
            "mean,{:.6},{:.6},{},{},",
            self.mean_psnr(),
            self.mean_ssim(),
            opt(self.mean_input_psnr()),
            opt(self.mean_input_ssim())
        )
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::sharp_image;

    #[test]
    fn psnr_cases() {
        let a = Image::filled(8, 8, 3, 0.5).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b = Image::filled(8, 8, 3, 0.5 + 1.0 / 255.0).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &Image::filled(8, 7, 3, 0.5).unwrap(), 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = sharp_image(16, 16, 3, 1).unwrap();
        let noisy = |amp: f64| {
            let mut b = a.clone();
            for (i, v) in b.data_mut().iter_mut().enumerate() {
                *v += if i % 2 == 0 { amp } else { -amp };
            }
            b
        };
        let p: Vec<f64> = [0.01, 0.02, 0.04]
            .iter()
            .map(|&m| psnr(&a, &noisy(m), 1.0).unwrap())
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = sharp_image(24, 20, 3, 2).unwrap();
        assert!((ssim(&a, &a).unwrap().value - 1.0).abs() < 1e-9);
        let zero = Image::filled(16, 16, 1, 0.0).unwrap();
        let one = Image::filled(16, 16, 1, 1.0).unwrap();
        let c1 = 0.01f64 * 0.01;
        let s = ssim(&zero, &one).unwrap();
        assert!((s.value - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(!s.global_fallback);
    }

    #[test]
    fn ssim_symmetry_and_fallback() {
        let a = sharp_image(20, 20, 3, 3).unwrap();
        let b = sharp_image(20, 20, 3, 4).unwrap();
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let v = ssim(&a, &b).unwrap().value;
        assert!((-1.0..=1.0).contains(&v));
        let small = ssim(&a.crop(0, 0, 8, 8).unwrap(), &b.crop(0, 0, 8, 8).unwrap()).unwrap();
        assert!(small.global_fallback);
    }

    fn place(img: &Image, dx: usize, dy: usize) -> Image {
        let (w, h) = (img.width() + dx + 3, img.height() + dy + 3);
        let mut canvas = Image::filled(w, h, img.channels(), 0.3).unwrap();
        for c in 0..img.channels() {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    canvas.data_mut()[(c * h + y + dy) * w + x + dx] = img.get(c, y, x);
                }
            }
        }
        canvas
    }

    #[test]
    fn ssim_is_translation_consistent() {
        let a = sharp_image(20, 20, 3, 5).unwrap();
        let b = sharp_image(20, 20, 3, 6).unwrap();
        let base = ssim(&a, &b).unwrap().value;
        for (dx, dy) in [(1, 0), (3, 2), (0, 5)] {
            let sa = place(&a, dx, dy).crop(dx, dy, 20, 20).unwrap();
            let sb = place(&b, dx, dy).crop(dx, dy, 20, 20).unwrap();
            assert!((ssim(&sa, &sb).unwrap().value - base).abs() < 1e-9);
        }
    }

    #[test]
    fn report_mean_row() {
        let report = MetricReport {
            rows: vec![
                MetricRow {
                    name: "a".into(),
                    psnr: 20.0,
                    ssim: 0.5,
                    input_psnr: Some(10.0),
                    input_ssim: None,
                    note: String::new(),
                },
                MetricRow {
                    name: "b".into(),
                    psnr: 30.0,
                    ssim: 0.7,
                    input_psnr: Some(20.0),
                    input_ssim: None,
                    note: String::new(),
                },
            ],
        };
        assert_eq!(report.mean_psnr(), 25.0);
        assert!((report.mean_ssim() - 0.6).abs() < 1e-15);
        assert_eq!(report.mean_input_psnr(), Some(15.0));
        let csv = report.to_csv();
        assert!(csv
            .lines()
            .last()
            .unwrap()
            .starts_with("mean,25.000000,0.600000,15.000000,,"));
    }
}
