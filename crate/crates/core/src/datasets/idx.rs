//! IDX binary files (the MNIST distribution format).
//!
//! Layout: 4-byte big-endian magic (`2051` images, `2049` labels), one
//! big-endian `u32` per dimension, then row-major unsigned bytes. Gzipped
//! files are detected by their header and decompressed transparently.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;

use super::RawImage;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn truncated(path: &Path) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated IDX file"),
    )
}

/// Parse an IDX image payload; ids are `<prefix>:<index>`.
pub fn parse_images(bytes: &[u8], prefix: &str, path: &Path) -> Result<Vec<RawImage>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic}, expected {IMAGE_MAGIC}",
            path.display()
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    }
    let [count, rows, cols] = dims;
    let plane = rows * cols;
    let start = cur.position() as usize;
    if bytes.len() < start + count * plane {
        return Err(truncated(path));
    }
    (0..count)
        .map(|i| {
            let px = bytes[start + i * plane..start + (i + 1) * plane].to_vec();
            RawImage::new(format!("{prefix}:{i:05}"), rows, cols, 1, px)
        })
        .collect()
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic}, expected {LABEL_MAGIC}",
            path.display()
        )));
    }
    let count = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    let start = cur.position() as usize;
    if bytes.len() < start + count {
        return Err(truncated(path));
    }
    Ok(bytes[start..start + count].to_vec())
}

/// Id prefix derived from the file name: `train-images-idx3-ubyte` → `train`.
fn id_prefix(path: &Path) -> String {
    path.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.split(['-', '.']).next())
        .filter(|s| !s.is_empty())
        .unwrap_or("idx")
        .to_string()
}

/// Load paired IDX image and label files.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<(RawImage, u8)>> {
    let images = parse_images(&read_maybe_gz(images_path)?, &id_prefix(images_path), images_path)?;
    let labels = parse_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.len(),
            labels_path.display(),
            labels.len()
        )));
    }
    Ok(images.into_iter().zip(labels).collect())
}
