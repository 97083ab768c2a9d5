//! NPY v1.0 reader/writer for little-endian float32, C-order 2-D arrays.
//!
//! Layout: `\x93NUMPY`, version bytes `1 0`, a little-endian u16 header
//! length, then an ASCII dict literal padded with spaces and terminated by
//! `\n` so that the payload starts on a 64-byte boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub descr: String,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
    /// Byte offset of the first payload element.
    pub data_offset: usize,
}

impl NpyHeader {
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }
}

/// Header bytes (preamble + padded dict) for a `<f4` C-order array.
pub fn encode_header(rows: usize, cols: usize) -> Vec<u8> {
    let dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    // +1 for the terminating newline
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let total = unpadded.div_ceil(ALIGN) * ALIGN;
    let header_len = total - PREAMBLE_LEN;

    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(total - 1, b' ');
    out.push(b'\n');
    out
}

pub fn write_f32(path: &Path, m: &Matrix<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&encode_header(m.rows(), m.cols())).map_err(io)?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_header<R: Read>(r: &mut R) -> Result<NpyHeader> {
    let mut pre = [0u8; PREAMBLE_LEN];
    r.read_exact(&mut pre)
        .map_err(|_| Error::Npy("file shorter than the NPY preamble".into()))?;
    if &pre[..6] != MAGIC {
        return Err(Error::Npy("bad magic string".into()));
    }
    if pre[6] != 1 || pre[7] != 0 {
        return Err(Error::Npy(format!("unsupported version {}.{}", pre[6], pre[7])));
    }
    let header_len = u16::from_le_bytes([pre[8], pre[9]]) as usize;
    let mut raw = vec![0u8; header_len];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Npy("truncated header".into()))?;
    if !(PREAMBLE_LEN + header_len).is_multiple_of(ALIGN) {
        return Err(Error::Npy("header is not padded to 64-byte alignment".into()));
    }
    if raw.last() != Some(&b'\n') {
        return Err(Error::Npy("header is not newline-terminated".into()));
    }
    let text = std::str::from_utf8(&raw).map_err(|_| Error::Npy("header is not ASCII".into()))?;
    let mut header = parse_dict(text.trim_end())?;
    header.data_offset = PREAMBLE_LEN + header_len;
    Ok(header)
}

fn parse_dict(text: &str) -> Result<NpyHeader> {
    let body = text
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| Error::Npy(format!("header is not a dict literal: {text}")))?;

    let value_of = |key: &str| -> Result<&str> {
        let pat = format!("'{key}':");
        let start = body
            .find(&pat)
            .ok_or_else(|| Error::Npy(format!("header lacks key '{key}'")))?
            + pat.len();
        Ok(body[start..].trim_start())
    };

    let descr = {
        let v = value_of("descr")?;
        let v = v
            .strip_prefix('\'')
            .ok_or_else(|| Error::Npy("descr is not a string".into()))?;
        let end = v.find('\'').ok_or_else(|| Error::Npy("unterminated descr".into()))?;
        v[..end].to_string()
    };
    let fortran_order = {
        let v = value_of("fortran_order")?;
        if v.starts_with("False") {
            false
        } else if v.starts_with("True") {
            true
        } else {
            return Err(Error::Npy("fortran_order is not a bool".into()));
        }
    };
    let shape = {
        let v = value_of("shape")?;
        let v = v
            .strip_prefix('(')
            .ok_or_else(|| Error::Npy("shape is not a tuple".into()))?;
        let end = v.find(')').ok_or_else(|| Error::Npy("unterminated shape".into()))?;
        v[..end]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Npy(format!("bad shape entry `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(NpyHeader {
        descr,
        fortran_order,
        shape,
        data_offset: 0,
    })
}

fn check_f32_c_order(h: &NpyHeader, path: &Path) -> Result<()> {
    if h.descr != "<f4" {
        return Err(Error::Npy(format!("{}: dtype {} is not <f4", path.display(), h.descr)));
    }
    if h.fortran_order {
        return Err(Error::Npy(format!(
            "{}: fortran-ordered arrays are not supported",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_header_from_path(path: &Path) -> Result<NpyHeader> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut f)
}

pub fn read_f32(path: &Path) -> Result<Matrix<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let h = read_header(&mut r)?;
    check_f32_c_order(&h, path)?;
    let (rows, cols) = (h.rows(), h.cols());
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Npy(format!("{}: payload is truncated", path.display())))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Reads selected rows of a 2-D `<f4` file by seeking, without loading the
/// remaining payload. Output rows follow `local_rows` order.
pub fn read_rows_f32(path: &Path, local_rows: &[usize]) -> Result<Matrix<f32>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let h = read_header(&mut f)?;
    check_f32_c_order(&h, path)?;
    let (rows, cols) = (h.rows(), h.cols());
    let row_bytes = cols * 4;
    let mut out = Matrix::<f32>::zeros(local_rows.len(), cols);
    let mut buf = vec![0u8; row_bytes];
    for (k, &r) in local_rows.iter().enumerate() {
        if r >= rows {
            return Err(Error::IndexOutOfRange { index: r, len: rows });
        }
        f.seek(SeekFrom::Start((h.data_offset + r * row_bytes) as u64))
            .map_err(|e| Error::io(path, e))?;
        f.read_exact(&mut buf)
            .map_err(|_| Error::Npy(format!("{}: payload is truncated", path.display())))?;
        for (dst, c) in out.row_mut(k).iter_mut().zip(buf.chunks_exact(4)) {
            *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_aligned_and_terminated() {
        for (r, c) in [(1, 1), (10_000, 10), (123_456_789, 533_458)] {
            let h = encode_header(r, c);
            assert_eq!(h.len() % 64, 0);
            assert_eq!(&h[..6], MAGIC);
            assert_eq!(&h[6..8], &[1, 0]);
            assert_eq!(*h.last().unwrap(), b'\n');
            let parsed = read_header(&mut h.as_slice()).unwrap();
            assert_eq!(parsed.descr, "<f4");
            assert!(!parsed.fortran_order);
            assert_eq!(parsed.shape, vec![r, c]);
            assert_eq!(parsed.data_offset, h.len());
        }
    }

    #[test]
    fn header_matches_numpy_text() {
        let h = encode_header(3, 4);
        let text = std::str::from_utf8(&h[10..]).unwrap();
        assert!(text.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (3, 4), }"));
        assert_eq!(h.len(), 128);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut h = encode_header(2, 2);
        h[1] = b'X';
        assert!(read_header(&mut h.as_slice()).is_err());
        let mut h = encode_header(2, 2);
        h[6] = 2;
        assert!(read_header(&mut h.as_slice()).is_err());
    }

    #[test]
    fn parses_one_dimensional_shape() {
        let h = parse_dict("{'descr': '<f4', 'fortran_order': False, 'shape': (7,), }").unwrap();
        assert_eq!(h.shape, vec![7]);
        assert_eq!(h.rows(), 7);
        assert_eq!(h.cols(), 1);
    }
}
