//! IDX image and label files.
//!
//! Big-endian header: magic `0x00000803` (images, then count, rows, cols) or
//! `0x00000801` (labels, then count), followed by one unsigned byte per pixel
//! or label.

use std::path::Path;

use mttt_core::data::Dataset;
use mttt_core::model::TokenScheme;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Images {
    pub rows: usize,
    pub cols: usize,
    /// One `rows * cols` byte buffer per image.
    pub pixels: Vec<Vec<u8>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::Truncated { path: self.path.into(), offset: self.bytes.len() as u64, needed: (n - left) as u64 });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::BadMagic { path: self.path.into(), found, expected });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                path: self.path.into(),
                message: format!("{} trailing bytes after offset {}", self.bytes.len() - self.pos, self.pos),
            });
        }
        Ok(())
    }
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Images> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(IMAGE_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut pixels = Vec::with_capacity(count);
    for _ in 0..count {
        pixels.push(r.take(rows * cols)?.to_vec());
    }
    r.finish()?;
    Ok(Images { rows, cols, pixels })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(LABEL_MAGIC)?;
    let count = r.u32()? as usize;
    let labels = r.take(count)?.to_vec();
    r.finish()?;
    Ok(labels)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_images(path: &Path) -> Result<Images> {
    parse_images(&read(path)?, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(&read(path)?, path)
}

/// Serialises images in IDX form.
pub fn encode_images(images: &Images) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len() * images.rows * images.cols);
    for v in [IMAGE_MAGIC, images.pixels.len() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for p in &images.pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`, keeping
/// at most `limit` instances.
pub fn load_mnist(dir: &Path, split: Split, scheme: TokenScheme, limit: Option<usize>) -> Result<Dataset<f64>> {
    let images = read_images(&dir.join(format!("{}-images-idx3-ubyte", split.prefix())))?;
    let labels = read_labels(&dir.join(format!("{}-labels-idx1-ubyte", split.prefix())))?;
    if images.pixels.len() != labels.len() {
        return Err(Error::CountMismatch { images: images.pixels.len(), labels: labels.len() });
    }
    if images.rows != images.cols {
        return Err(Error::Format { path: dir.into(), message: format!("images are {}x{}, not square", images.rows, images.cols) });
    }
    let keep = limit.unwrap_or(labels.len()).min(labels.len());
    Ok(Dataset::from_images(&images.pixels[..keep], &labels[..keep], images.rows, 1, 10, scheme)?)
}
