//! IDX (MNIST) file parsing. Gzip-compressed files are detected by their
//! magic bytes and decompressed transparently.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

/// 28x28 grey-scale digits with labels, pixels kept as raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Pixels scaled to `[0, 1]` by `/255`.
    pub fn image_f32(&self, i: usize) -> Vec<f32> {
        self.image(i).iter().map(|&b| b as f32 / 255.0).collect()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// The first `n` items (all of them when `n >= len`).
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.pixels.truncate(n * self.rows * self.cols);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("truncated IDX header ({what})")))
}

/// Parses the magic number and dimension sizes; returns the header and the
/// offset of the payload.
pub fn parse_idx_header(bytes: &[u8]) -> Result<(IdxHeader, usize)> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic >> 8 != 0x08 {
        return Err(Error::Data(format!("IDX magic {magic:#010x} does not describe unsigned bytes")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|d| be_u32(bytes, 4 + 4 * d, "dimensions").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((IdxHeader { magic, dims }, 4 + 4 * rank))
}

pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: corrupt gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn payload<'a>(bytes: &'a [u8], expect_magic: u32, expect_rank: usize, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let (h, off) = parse_idx_header(bytes)?;
    if h.magic != expect_magic || h.dims.len() != expect_rank {
        return Err(Error::Data(format!("{what}: magic {} (expected {expect_magic})", h.magic)));
    }
    let need: usize = h.dims.iter().product();
    let body = &bytes[off..];
    if body.len() < need {
        return Err(Error::Data(format!("{what}: truncated, {} of {need} payload bytes", body.len())));
    }
    Ok((h.dims, &body[..need]))
}

/// Parses an image file and a label file that are already in memory.
pub fn parse_mnist(images: &[u8], labels: &[u8]) -> Result<MnistSet> {
    let (idims, ipix) = payload(images, IMAGES_MAGIC, 3, "images")?;
    let (ldims, lab) = payload(labels, LABELS_MAGIC, 1, "labels")?;
    if idims[0] != ldims[0] {
        return Err(Error::Data(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    if let Some(bad) = lab.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("label {bad} outside 0..=9")));
    }
    Ok(MnistSet { rows: idims[1], cols: idims[2], pixels: ipix.to_vec(), labels: lab.to_vec() })
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistSet> {
    parse_mnist(&read_maybe_gzip(images_path)?, &read_maybe_gzip(labels_path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    fn fixture(n_img: u32, n_lab: u32) -> (Vec<u8>, Vec<u8>) {
        let mut imgs = header(IMAGES_MAGIC, &[n_img, 2, 2]);
        imgs.extend((0..n_img * 4).map(|i| if i % 4 == 0 { 255 } else { (i % 7) as u8 }));
        let mut labs = header(LABELS_MAGIC, &[n_lab]);
        labs.extend((0..n_lab).map(|i| (i % 10) as u8));
        (imgs, labs)
    }

    #[test]
    fn official_train_header() {
        // First 16 bytes of the published train-images-idx3-ubyte.
        let bytes = [0, 0, 8, 3, 0, 0, 0xea, 0x60, 0, 0, 0, 0x1c, 0, 0, 0, 0x1c];
        let (h, off) = parse_idx_header(&bytes).unwrap();
        assert_eq!(h, IdxHeader { magic: 2051, dims: vec![60000, 28, 28] });
        assert_eq!(off, 16);
    }

    #[test]
    fn parses_and_scales() {
        let (i, l) = fixture(3, 3);
        let set = parse_mnist(&i, &l).unwrap();
        assert_eq!((set.len(), set.rows, set.cols), (3, 2, 2));
        assert_eq!(set.image_f32(1)[0], 1.0);
        assert_eq!(set.label(2), 2);
    }

    #[test]
    fn rejects_corruption() {
        let (i, l) = fixture(3, 2);
        assert!(matches!(parse_mnist(&i, &l), Err(Error::Data(_))));
        let (i, l) = fixture(3, 3);
        assert!(parse_mnist(&i[..i.len() - 1], &l).is_err());
        assert!(parse_mnist(&l, &i).is_err());
        assert!(parse_mnist(&i[..6], &l).is_err());
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture(4, 4);
        let ip = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&i).unwrap();
        std::fs::write(&ip, enc.finish().unwrap()).unwrap();
        let lp = dir.path().join("lab");
        std::fs::write(&lp, &l).unwrap();
        assert_eq!(load_mnist_idx(&ip, &lp).unwrap(), parse_mnist(&i, &l).unwrap());
        assert!(matches!(load_mnist_idx(&dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }
}
