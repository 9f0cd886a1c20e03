//! Binary PGM (P5) and PPM (P6) codecs.

use std::path::Path;

use pyrad_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

impl PnmImage {
    /// 3×H×W in [0, 1]; grayscale is replicated to all three channels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let scale = f32::from(self.maxval);
        Tensor::from_fn([3, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            let src = if c == 1 { p } else { p * 3 + ch };
            f32::from(self.samples[src]) / scale
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<PnmImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::format(path, "unsupported image format (expected binary PGM P5 or PPM P6)"));
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let mut field = |name: &str| cur.number().ok_or_else(|| Error::format(path, format!("malformed header: bad {name}")));
    let (width, height, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(Error::format(path, format!("invalid header {width}×{height} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed header: missing raster separator"));
    }
    let raster = &bytes[cur.pos + 1..];
    let n = width * height * channels;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    if raster.len() < need {
        return Err(Error::format(path, format!("truncated raster: need {need} bytes, found {}", raster.len())));
    }
    let samples: Vec<u16> = if wide {
        raster[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        raster[..need].iter().map(|&b| u16::from(b)).collect()
    };
    if let Some(&bad) = samples.iter().find(|&&s| usize::from(s) > maxval) {
        return Err(Error::format(path, format!("sample {bad} exceeds maxval {maxval}")));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a 3×H×W tensor as an 8-bit P6 file.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Config(format!("PPM needs a 3×H×W image, got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Encode the first channel of a C×H×W tensor as an 8-bit P5 file.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[_, h, w] = img.shape() else {
        return Err(Error::Config(format!("PGM needs a C×H×W image, got {:?}", img.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data()[..h * w].iter().map(|&v| quantize(v)));
    Ok(out)
}
