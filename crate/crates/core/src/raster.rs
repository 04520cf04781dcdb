//! In-memory rasters and the CDRAST1 container.
//!
//! CDRAST1 layout (little-endian): 8-byte magic `CDRAST1\0`, then u32 height,
//! u32 width, u32 channels, u32 dtype code, then the planar payload with no
//! padding. Pixel `(c, y, x)` lives at index `c*h*w + y*w + x`.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const RASTER_MAGIC: &[u8; 8] = b"CDRAST1\0";
pub const HEADER_LEN: usize = 24;

/// Mask label for unchanged pixels.
pub const UNCHANGED: u8 = 0;
/// Mask label for changed pixels (binary case).
pub const CHANGED: u8 = 1;
/// Mask label for pixels excluded from loss, metrics and confidence.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Dtype {
    U8 = 0,
    U16 = 1,
    F32 = 2,
}

impl Dtype {
    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Dtype::U8),
            1 => Ok(Dtype::U16),
            2 => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }
}

/// A C-plane, row-major f32 image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(invalid!(
                "raster data length {} does not match {channels}x{height}x{width} = {expected}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("raster contains a non-finite value at index {i}"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        c * self.height * self.width + y * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Applies `f(channel, value)` to every sample. The result must stay finite.
    pub fn map_bands(&self, mut f: impl FnMut(usize, f32) -> f32) -> Result<Raster> {
        let n = self.pixels();
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i / n, v)).collect();
        Raster::new(self.height, self.width, self.channels, data)
    }
}

/// Per-pixel change labels: 0 unchanged, 1..=K change classes, 255 ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ChangeMask {
    /// Builds a binary-scheme mask; only {0, 1, 255} are accepted.
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        Self::with_classes(height, width, labels, 1)
    }

    /// Builds a mask for `num_change_classes` change classes (labels `0..=K` plus 255).
    pub fn with_classes(height: usize, width: usize, labels: Vec<u8>, num_change_classes: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("mask dimensions must be positive, got {height}x{width}"));
        }
        if labels.len() != height * width {
            return Err(invalid!("mask length {} does not match {height}x{width}", labels.len()));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE && usize::from(l) > num_change_classes)
        {
            return Err(invalid!("mask contains label {bad} outside the class scheme"));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn matches(&self, r: &Raster) -> bool {
        self.height == r.height() && self.width == r.width()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn valid_count(&self) -> usize {
        self.labels.len() - self.count(IGNORE)
    }

    pub fn to_raster(&self) -> Raster {
        let data = self.labels.iter().map(|&l| f32::from(l)).collect();
        Raster::new(self.height, self.width, 1, data).expect("mask dims are positive")
    }
}

/// Typed payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
enum Payload {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Payload {
    fn dtype(&self) -> Dtype {
        match self {
            Payload::U8(_) => Dtype::U8,
            Payload::U16(_) => Dtype::U16,
            Payload::F32(_) => Dtype::F32,
        }
    }

    fn to_f32(&self) -> Vec<f32> {
        match self {
            Payload::U8(v) => v.iter().map(|&x| f32::from(x)).collect(),
            Payload::U16(v) => v.iter().map(|&x| f32::from(x)).collect(),
            Payload::F32(v) => v.clone(),
        }
    }
}

struct Header {
    height: usize,
    width: usize,
    channels: usize,
    dtype: Dtype,
}

fn encode(header: &Header, payload: &Payload) -> Vec<u8> {
    let n = header.height * header.width * header.channels;
    let mut out = Vec::with_capacity(HEADER_LEN + n * header.dtype.size());
    out.extend_from_slice(RASTER_MAGIC);
    for v in [header.height, header.width, header.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(header.dtype as u32).to_le_bytes());
    match payload {
        Payload::U8(v) => out.extend_from_slice(v),
        Payload::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn decode(bytes: &[u8]) -> Result<(Header, Payload)> {
    if bytes.len() < 8 || &bytes[..8] != RASTER_MAGIC {
        return Err(Error::Format("missing CDRAST1 magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!(
            "header truncated: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (height, width, channels) = (word(8), word(12), word(16));
    let dtype = Dtype::from_code(word(20) as u32)?;
    if height == 0 || width == 0 || channels == 0 {
        return Err(invalid!("zero dimension in header: {height}x{width}x{channels}"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    let need = n * dtype.size();
    if body.len() < need {
        return Err(Error::Corruption(format!(
            "payload truncated: {} of {need} bytes",
            body.len()
        )));
    }
    if body.len() > need {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after payload",
            body.len() - need
        )));
    }
    let payload = match dtype {
        Dtype::U8 => Payload::U8(body.to_vec()),
        Dtype::U16 => Payload::U16(body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
        Dtype::F32 => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Ok((
        Header {
            height,
            width,
            channels,
            dtype,
        },
        payload,
    ))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a CDRAST1 byte buffer; integer payloads are widened exactly to f32.
pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let (h, payload) = decode(bytes)?;
    Raster::new(h.height, h.width, h.channels, payload.to_f32())
}

pub fn encode_raster(r: &Raster) -> Vec<u8> {
    let header = Header {
        height: r.height,
        width: r.width,
        channels: r.channels,
        dtype: Dtype::F32,
    };
    encode(&header, &Payload::F32(r.data.clone()))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    decode_raster(&read_bytes(path)?).map_err(|e| annotate(e, path))
}

pub fn write_raster(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_raster(r))
}

/// Writes a raster whose samples are all integers in `0..=255` using dtype u8.
pub fn write_raster_u8(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(r.data.len());
    for &v in &r.data {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(invalid!("value {v} is not representable as u8"));
        }
        bytes.push(v as u8);
    }
    let header = Header {
        height: r.height,
        width: r.width,
        channels: r.channels,
        dtype: Dtype::U8,
    };
    write_bytes(path.as_ref(), &encode(&header, &Payload::U8(bytes)))
}

pub fn encode_mask(m: &ChangeMask) -> Vec<u8> {
    let header = Header {
        height: m.height,
        width: m.width,
        channels: 1,
        dtype: Dtype::U8,
    };
    encode(&header, &Payload::U8(m.labels.clone()))
}

pub fn decode_mask(bytes: &[u8], num_change_classes: usize) -> Result<ChangeMask> {
    let (h, payload) = decode(bytes)?;
    if h.channels != 1 {
        return Err(invalid!("mask must have 1 channel, found {}", h.channels));
    }
    let Payload::U8(labels) = payload else {
        return Err(Error::Format(format!(
            "mask must be dtype u8, found {:?}",
            payload.dtype()
        )));
    };
    ChangeMask::with_classes(h.height, h.width, labels, num_change_classes)
}

pub fn read_mask(path: impl AsRef<Path>, num_change_classes: usize) -> Result<ChangeMask> {
    let path = path.as_ref();
    decode_mask(&read_bytes(path)?, num_change_classes).map_err(|e| annotate(e, path))
}

pub fn write_mask(m: &ChangeMask, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(m))
}

fn annotate(e: Error, path: &Path) -> Error {
    let where_ = path.display();
    match e {
        Error::Format(m) => Error::Format(format!("{where_}: {m}")),
        Error::Corruption(m) => Error::Corruption(format!("{where_}: {m}")),
        Error::Validation(m) => Error::Validation(format!("{where_}: {m}")),
        other => other,
    }
}
