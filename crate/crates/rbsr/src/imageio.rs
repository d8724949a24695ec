//! PPM/PGM (binary P6/P5) codec and raster <-> float tensor conversion.
//!
//! The only interchange format of the toolkit. maxval is fixed to 255 and
//! rounding float -> u8 is half-away-from-zero, so round trips are bit-exact.

use std::path::Path;

use crate::error::{RbsrError, Result};

/// 8-bit raster, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(RbsrError::Image(format!(
                "unsupported channel count {channels} (must be 1 or 3)"
            )));
        }
        if data.len() != width * height * channels {
            return Err(RbsrError::Image(format!(
                "raster length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

/// Float image, channel-planar (c, h, w), decoded values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Average of all channels, as a single-channel image.
    pub fn to_luma(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let mut data = vec![0.0f32; n];
        for c in 0..self.channels {
            let plane = self.plane(c);
            for (d, p) in data.iter_mut().zip(plane) {
                *d += p / self.channels as f32;
            }
        }
        ImageTensor::new(1, self.height, self.width, data)
    }
}

/// Header token reader: skips whitespace and '#' comment lines.
struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_ws_and_comments(&mut self) -> Result<()> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn next_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments()?;
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(RbsrError::Image(format!("malformed header: missing {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<usize>()
            .map_err(|_| RbsrError::Image(format!("malformed header: bad {what} '{text}'")))
    }
}

/// Decode a binary PPM (P6) or PGM (P5) byte stream.
pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < 2 {
        return Err(RbsrError::Image("malformed header: too short".into()));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => {
            return Err(RbsrError::Image(
                "malformed header: magic must be P5 or P6".into(),
            ))
        }
    };
    let mut cur = HeaderCursor::new(&bytes[2..]);
    let width = cur.next_uint("width")?;
    let height = cur.next_uint("height")?;
    let maxval = cur.next_uint("maxval")?;
    if maxval != 255 {
        return Err(RbsrError::Image(format!(
            "unsupported maxval {maxval} (only 255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(RbsrError::Image("malformed header: zero dimension".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster_start = 2 + cur.pos;
    if raster_start >= bytes.len() || !bytes[raster_start].is_ascii_whitespace() {
        return Err(RbsrError::Image(
            "malformed header: missing separator before raster".into(),
        ));
    }
    let raster = &bytes[raster_start + 1..];
    let expected = width * height * channels;
    if raster.len() < expected {
        return Err(RbsrError::Image(format!(
            "truncated raster: have {} bytes, need {expected}",
            raster.len()
        )));
    }
    RawImage::new(width, height, channels, raster[..expected].to_vec())
}

/// Encode to binary PPM (3 channels) or PGM (1 channel), maxval 255.
pub fn encode_ppm(image: &RawImage) -> Vec<u8> {
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let header = format!("{magic}\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&image.data);
    out
}

/// Interleaved u8 -> planar f32, exact v/255 mapping.
pub fn to_tensor(image: &RawImage) -> ImageTensor {
    let (w, h, c) = (image.width, image.height, image.channels);
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data[(y * w + x) * c + ch];
                data[(ch * h + y) * w + x] = v as f32 / 255.0;
            }
        }
    }
    ImageTensor::new(c, h, w, data)
}

/// Round half away from zero. `f32::round` has exactly this semantics.
#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar f32 -> interleaved u8: clamp to [0,1], scale by 255, round half-away-from-zero.
pub fn to_raw(tensor: &ImageTensor) -> Result<RawImage> {
    let (c, h, w) = (tensor.channels, tensor.height, tensor.width);
    if c != 1 && c != 3 {
        return Err(RbsrError::Image(format!(
            "cannot rasterize {c}-channel tensor"
        )));
    }
    let mut data = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(y * w + x) * c + ch] = quantize(tensor.at(ch, y, x));
            }
        }
    }
    RawImage::new(w, h, c, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| RbsrError::io(path.display().to_string(), e))?;
    Ok(to_tensor(&decode_ppm(&bytes)?))
}

pub fn write_image(path: impl AsRef<Path>, tensor: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(&to_raw(tensor)?);
    std::fs::write(path, bytes).map_err(|e| RbsrError::io(path.display().to_string(), e))
}
