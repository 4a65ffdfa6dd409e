use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Planar image with values in `[0, 1]` and 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Config(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Image::new(w, h, self.channels, data)
    }

    /// One of the 8 flips/rotations of the square's symmetry group:
    /// bit 0 mirrors x, bit 1 mirrors y, bit 2 transposes (applied last).
    pub fn dihedral(&self, code: u8) -> Image {
        let (w, h) = (self.width, self.height);
        let transpose = code & 4 != 0;
        let (ow, oh) = if transpose { (h, w) } else { (w, h) };
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut x, mut y) = if transpose { (oy, ox) } else { (ox, oy) };
                    if code & 1 != 0 {
                        x = w - 1 - x;
                    }
                    if code & 2 != 0 {
                        y = h - 1 - y;
                    }
                    data.push(self.get(c, y, x));
                }
            }
        }
        Image::new(ow, oh, self.channels, data).expect("consistent dims")
    }

    /// Mirror-pads right and bottom edges up to `w x h`.
    pub fn pad_to(&self, w: usize, h: usize) -> Image {
        let mut data = Vec::with_capacity(w * h * self.channels);
        for c in 0..self.channels {
            for y in 0..h {
                let sy = super::mirror_index(y as isize, self.height);
                for x in 0..w {
                    data.push(self.get(c, sy, super::mirror_index(x as isize, self.width)));
                }
            }
        }
        Image::new(w, h, self.channels, data).expect("consistent dims")
    }

    /// `[1, C, H, W]` tensor at compute precision.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[1, self.channels, self.height, self.width], &self.data)
            .expect("consistent dims")
    }

    /// Batch of equally sized images as `[B, C, H, W]`.
    pub fn stack<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Config("empty image batch".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * images.len());
        for img in images {
            if !img.same_dims(first) {
                return Err(Error::shape(
                    "stack",
                    "images in a batch must share dimensions",
                ));
            }
            data.extend(img.data.iter().map(|&v| T::from_f64(v)));
        }
        Tensor::new(
            &[images.len(), first.channels, first.height, first.width],
            data,
        )
    }

    /// Image from item `index` of a `[B, C, H, W]` tensor; values are not clamped.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Image> {
        let &[b, c, h, w] = t.shape() else {
            return Err(Error::shape(
                "from_tensor",
                format!("expected rank 4, got {:?}", t.shape()),
            ));
        };
        if index >= b {
            return Err(Error::shape(
                "from_tensor",
                format!("batch index {index} out of {b}"),
            ));
        }
        let n = c * h * w;
        let data = t.data()[index * n..(index + 1) * n]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        Image::new(w, h, c, data)
    }

    /// Rec. 601 luma for colour images; the single plane otherwise.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// Decodes binary 8-bit PGM (`P5`) or PPM (`P6`).
    pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0usize;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic.as_slice() {
            b"P5" => 1,
            b"P6" => 3,
            other => {
                return Err(Error::Format(format!(
                    "unsupported magic {:?}; need P5 or P6",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = header_number(bytes, &mut pos, "width")?;
        let height = header_number(bytes, &mut pos, "height")?;
        let maxval = header_number(bytes, &mut pos, "maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!(
                "maxval {maxval} unsupported; only 255"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("missing whitespace after maxval".into()));
        }
        pos += 1;
        let need = width * height * channels;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(Error::Format(format!(
                "truncated raster: {} of {need} bytes",
                raster.len()
            )));
        }
        let plane = width * height;
        let mut data = vec![0.0; need];
        for (i, &b) in raster[..need].iter().enumerate() {
            let (px, c) = (i / channels, i % channels);
            data[c * plane + px] = b as f64 / 255.0;
        }
        Image::new(width, height, channels, data)
    }

    /// Encodes as `P5`/`P6`, rounding half up to the nearest 8-bit level.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.width * self.height;
        out.reserve(plane * self.channels);
        for px in 0..plane {
            for c in 0..self.channels {
                out.push(quantize(self.data[c * plane + px]));
            }
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pnm(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_pnm())
            .map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("unexpected end of header".into()));
    }
    Ok(bytes[start..*pos].to_vec())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(&tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Format(format!("bad {what} `{}`", String::from_utf8_lossy(&tok))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dihedral_group() {
        let img = Image::new(3, 2, 1, (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(img.dihedral(0), img);
        assert_eq!(img.dihedral(1).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(img.dihedral(2).data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
        let t = img.dihedral(4);
        assert_eq!((t.width(), t.height()), (2, 3));
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let all: Vec<_> = (0..8).map(|c| img.dihedral(c)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j]);
            }
        }
        for c in 0..4 {
            assert_eq!(img.dihedral(c).dihedral(c), img);
        }
    }

    #[test]
    fn random_round_trip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for channels in [1, 3] {
            let data = (0..7 * 5 * channels).map(|_| rng.gen::<f64>()).collect();
            let img = Image::new(7, 5, channels, data).unwrap();
            let back = Image::decode_pnm(&img.encode_pnm()).unwrap();
            assert!(back.same_dims(&img));
            let err = img
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12, "{err}");
        }
    }

    #[test]
    fn zero_image_round_trips_exactly() {
        let img = Image::filled(4, 3, 3, 0.0).unwrap();
        assert_eq!(Image::decode_pnm(&img.encode_pnm()).unwrap(), img);
    }

    #[test]
    fn half_level_rounds_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.2), 0);
    }

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5 # grey\n# another\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let img = Image::decode_pnm(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_files() {
        let mut deep = b"P6\n1 1\n65535\n".to_vec();
        deep.extend([0; 6]);
        assert!(matches!(Image::decode_pnm(&deep), Err(Error::Format(_))));
        let mut short = b"P6\n2 2\n255\n".to_vec();
        short.extend([0; 11]);
        assert!(Image::decode_pnm(&short)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(Image::decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Image::decode_pnm(b"P5\n0 1\n255\n").is_err());
        assert!(Image::decode_pnm(b"P5\n1").is_err());
    }
}
