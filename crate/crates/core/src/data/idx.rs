//! IDX file ingestion (the MNIST distribution format): big-endian header,
//! unsigned-byte payload, optional gzip wrapping.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::bufread::GzDecoder;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Byte reader that knows its offset so errors can point at it.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Parse {
                        offset: self.offset,
                        msg: format!(
                            "truncated file: needed {} more bytes of {what}",
                            buf.len() - filled
                        ),
                    });
                }
                Ok(n) => {
                    filled += n;
                    self.offset += n as u64;
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Parse {
                offset: self.offset,
                msg: "trailing bytes after payload".into(),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf_peek()?;
    if head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

/// Small extension so we can sniff the gzip magic without consuming it.
trait PeekExt {
    fn fill_buf_peek(&mut self) -> std::io::Result<&[u8]>;
}

impl<R: Read> PeekExt for BufReader<R> {
    fn fill_buf_peek(&mut self) -> std::io::Result<&[u8]> {
        std::io::BufRead::fill_buf(self)
    }
}

fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut c = Cursor::new(open(path)?);
    let magic = c.read_u32("image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = c.read_u32("image count")? as usize;
    let rows = c.read_u32("row count")? as usize;
    let cols = c.read_u32("column count")? as usize;
    if n > 0 && (rows == 0 || cols == 0) {
        return Err(Error::Parse {
            offset: c.offset,
            msg: format!("degenerate image dims {rows}x{cols}"),
        });
    }
    let mut bytes = vec![0u8; n * rows * cols];
    c.read_exact(&mut bytes, "image pixels")?;
    c.expect_eof()?;
    Ok((n, rows, cols, bytes))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let mut c = Cursor::new(open(path)?);
    let magic = c.read_u32("label magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = c.read_u32("label count")? as usize;
    let mut bytes = vec![0u8; n];
    c.read_exact(&mut bytes, "labels")?;
    c.expect_eof()?;
    Ok(bytes)
}

/// Load a paired images/labels IDX file set as a single-channel dataset,
/// pixels scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixel_bytes) = read_images(images_path)?;
    let label_bytes = read_labels(labels_path)?;
    if label_bytes.len() != n {
        return Err(Error::Parse {
            offset: 0,
            msg: format!(
                "count mismatch: {n} images in {} but {} labels in {}",
                images_path.display(),
                label_bytes.len(),
                labels_path.display()
            ),
        });
    }
    let pixels: Vec<f32> = pixel_bytes.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, split, [rows, cols, 1], pixels, labels, classes)
}

/// Write an images IDX file (optionally gzipped when the path ends in .gz).
pub fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    let mut payload = Vec::with_capacity(16 + images.len() * rows * cols);
    payload.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    payload.extend_from_slice(&(images.len() as u32).to_be_bytes());
    payload.extend_from_slice(&(rows as u32).to_be_bytes());
    payload.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::invalid(format!(
                "image has {} bytes, expected {}",
                img.len(),
                rows * cols
            )));
        }
        payload.extend_from_slice(img);
    }
    write_maybe_gz(path, &payload)
}

/// Write a labels IDX file (optionally gzipped when the path ends in .gz).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut payload = Vec::with_capacity(8 + labels.len());
    payload.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    payload.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    payload.extend_from_slice(labels);
    write_maybe_gz(path, &payload)
}

fn write_maybe_gz(path: &Path, payload: &[u8]) -> Result<()> {
    use std::io::Write;
    if path.extension().is_some_and(|e| e == "gz") {
        let file = File::create(path)?;
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(payload)?;
        enc.finish()?;
    } else {
        std::fs::write(path, payload)?;
    }
    Ok(())
}
