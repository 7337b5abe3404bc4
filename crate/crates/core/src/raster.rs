//! Hard binary masks, 8-bit RGB images and their lossless PNG encodings.

use std::io::{BufReader, Cursor};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unexpected image format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width * height).then_some(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `(intersection, union)` pixel counts.
    pub fn overlap_counts(&self, other: &Mask) -> (u64, u64) {
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += u64::from(a && b);
            union += u64::from(a || b);
        }
        (inter, union)
    }

    /// Inclusive `(min_x, min_y, max_x, max_y)` of the foreground, if any.
    pub fn extent(&self) -> Option<(usize, usize, usize, usize)> {
        let mut ext: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    ext = Some(match ext {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        ext
    }

    /// Foreground as `1.0` / background as `0.0`, row-major.
    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        encode_png(
            self.width,
            self.height,
            png::ColorType::Grayscale,
            png::BitDepth::One,
            &packed,
        )
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let (info, buf) = decode_png(bytes)?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
            return Err(RasterError::Format(format!(
                "mask must be 1-bit grayscale, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let row_bytes = info.line_size;
        Ok(Self::from_fn(w, h, |x, y| {
            buf[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        Self::from_png(&std::fs::read(path)?)
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Intensity in `[0, 1]` of channel `c` at `(x, y)`.
    pub fn intensity(&self, x: usize, y: usize, c: usize) -> f32 {
        f32::from(self.data[(y * self.width + x) * 3 + c]) / 255.0
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        encode_png(
            self.width,
            self.height,
            png::ColorType::Rgb,
            png::BitDepth::Eight,
            &self.data,
        )
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let (info, buf) = decode_png(bytes)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(RasterError::Format(format!(
                "image must be 8-bit RGB, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            data.extend_from_slice(&buf[y * info.line_size..y * info.line_size + w * 3]);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        Self::from_png(&std::fs::read(path)?)
    }
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>, RasterError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<(png::OutputInfo, Vec<u8>), RasterError> {
    let mut dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::Format("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    Ok((info, buf))
}
