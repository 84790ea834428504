//! IDX files: big-endian dimensions after a magic number whose third byte
//! is the element type (only unsigned bytes here) and fourth the rank.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;

/// Parsed IDX content.
#[derive(Clone, Debug, PartialEq)]
pub enum Idx<T> {
    /// Rank-1 file: one byte per label.
    Labels(Vec<usize>),
    /// Rank-3 file of `n` images `h × w`, as `[n, 1, h, w]` scaled to [0, 1].
    Images(Tensor<T>),
}

fn parse(path: &Path, bytes: &[u8]) -> Result<(u32, Vec<usize>, usize)> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| fail(at, "file ends inside the header".into()))
    };
    let magic = word(0)?;
    let rank = match magic {
        LABEL_MAGIC => 1,
        IMAGE_MAGIC => 3,
        other => return Err(fail(0, format!("unsupported magic number {other:#010x}"))),
    };
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(word(4 + 4 * i)? as usize);
    }
    let start = 4 + 4 * rank;
    let count: usize = dims.iter().product();
    if bytes.len() < start + count {
        return Err(fail(bytes.len(), format!("expected {count} data bytes after offset {start}")));
    }
    if bytes.len() > start + count {
        return Err(fail(start + count, "trailing bytes".into()));
    }
    Ok((magic, dims, start))
}

pub fn read_idx<T: Scalar>(path: &Path) -> Result<Idx<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, dims, start) = parse(path, &bytes)?;
    let data = &bytes[start..];
    if magic == LABEL_MAGIC {
        return Ok(Idx::Labels(data.iter().map(|&b| b as usize).collect()));
    }
    let scale = T::lit(1.0 / 255.0);
    let values = data.iter().map(|&b| T::from_u8(b).expect("byte") * scale).collect();
    if dims.contains(&0) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 4,
            message: format!("empty image dimensions {dims:?}"),
        });
    }
    Ok(Idx::Images(Tensor::new(vec![dims[0], 1, dims[1], dims[2]], values)?))
}

pub fn read_idx_images<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    match read_idx(path)? {
        Idx::Images(t) => Ok(t),
        Idx::Labels(_) => Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "expected an image file, found labels".into(),
        }),
    }
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    match read_idx::<f64>(path)? {
        Idx::Labels(l) => Ok(l),
        Idx::Images(_) => Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "expected a label file, found images".into(),
        }),
    }
}

/// Writes `[n, 1, h, w]` (or `[n, h, w]`) images in [0, 1], rounded to bytes.
pub fn write_idx_images<T: Scalar>(path: &Path, images: &Tensor<T>) -> Result<()> {
    let dims: Vec<usize> = match images.shape() {
        [n, 1, h, w] | [n, h, w] => vec![*n, *h, *w],
        other => return Err(Error::shape("write_idx_images", format!("{other:?}; expected grayscale"))),
    };
    let mut out = IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|v| (v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = LABEL_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn four_two_by_two_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend((0..16).map(|i| if i == 5 { 255 } else { i as u8 }));
        let t = read_idx_images::<f64>(&fixture(dir.path(), "img", &bytes)).unwrap();
        assert_eq!(t.shape(), &[4, 1, 2, 2]);
        assert_eq!(t.data()[5], 1.0);
        assert_eq!(t.data()[0], 0.0);
    }

    #[test]
    fn label_file() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = [0, 0, 8, 1, 0, 0, 0, 4, 3, 1, 4, 1];
        assert_eq!(read_idx_labels(&fixture(dir.path(), "lab", &bytes)).unwrap(), vec![3, 1, 4, 1]);
    }

    #[test]
    fn errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = fixture(dir.path(), "m", &[0, 0, 8, 9, 0, 0, 0, 1, 7]);
        assert!(matches!(read_idx::<f64>(&bad_magic), Err(Error::Format { offset: 0, .. })));
        let truncated = fixture(dir.path(), "t", &[0, 0, 8, 1, 0, 0, 0, 4, 3, 1]);
        assert!(matches!(read_idx::<f64>(&truncated), Err(Error::Format { offset: 10, .. })));
        let short_header = fixture(dir.path(), "h", &[0, 0, 8, 3, 0, 0]);
        assert!(matches!(read_idx::<f64>(&short_header), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn written_files_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_f64(vec![2, 1, 1, 2], &[0.0, 1.0, 0.2, 0.6]).unwrap();
        let p = dir.path().join("i.idx");
        write_idx_images(&p, &img).unwrap();
        let back = read_idx_images::<f64>(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0);
        let q = dir.path().join("l.idx");
        write_idx_labels(&q, &[9, 0]).unwrap();
        assert_eq!(read_idx_labels(&q).unwrap(), vec![9, 0]);
        assert!(write_idx_labels(&q, &[300]).is_err());
    }
}
