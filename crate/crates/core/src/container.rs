//! Binary tensor (`EMB1`) and label (`LBL1`) containers.
//!
//! `EMB1` layout, all integers little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | ASCII `EMB1` |
//! | 4 | 1 | dtype code (`0x01` float32, `0x02` float64) |
//! | 5 | 1 | rank, always 2 |
//! | 6 | 16 | `u64` dims `(n_samples, n_features)` |
//! | 22 | … | row-major payload |
//!
//! Activation dumps are float32 only. Float64 is reserved for model
//! checkpoints, which must round-trip exactly.
//!
//! `LBL1` layout: ASCII `LBL1`, `u64` count, then `count` × `u32` class indices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::math::DenseMatrix;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const LBL1_MAGIC: &[u8; 4] = b"LBL1";
pub const EMB1_HEADER_LEN: u64 = 22;
pub const LBL1_HEADER_LEN: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0x01,
    F64 = 0x02,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(Dtype::F32),
            0x02 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Parsed `EMB1` header plus the file length it was checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emb1Header {
    pub dtype: Dtype,
    pub rows: u64,
    pub cols: u64,
}

impl Emb1Header {
    pub fn payload_bytes(&self) -> u64 {
        self.rows * self.cols * self.dtype.size()
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let tmp = tmp_path(path);
    let result = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        write(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()
    });
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_emb1_header(w: &mut impl Write, dtype: Dtype, rows: usize, cols: usize) -> std::io::Result<()> {
    w.write_all(EMB1_MAGIC)?;
    w.write_all(&[dtype as u8, 2])?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())
}

/// Writes a float32 tensor.
pub fn write_emb1_f32(path: impl AsRef<Path>, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    if values.len() != rows * cols {
        return Err(Error::invalid(format!(
            "{} values for a {rows} x {cols} tensor",
            values.len()
        )));
    }
    write_atomic(path, |w| {
        write_emb1_header(w, Dtype::F32, rows, cols)?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    })
}

/// Writes a matrix as float32 (values are rounded to nearest).
pub fn write_emb1(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let values: Vec<f32> = m.data().iter().map(|v| *v as f32).collect();
    write_emb1_f32(path, m.rows(), m.cols(), &values)
}

/// Writes a matrix losslessly as float64.
pub fn write_emb1_f64(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        write_emb1_header(w, Dtype::F64, m.rows(), m.cols())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    })
}

fn open(path: &Path) -> Result<(BufReader<File>, u64)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    Ok((BufReader::new(f), len))
}

fn read_header_bytes<const N: usize>(r: &mut impl Read, path: &Path, len: u64) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, len, format!("truncated header: {len} bytes, need {N}")))?;
    Ok(buf)
}

fn parse_emb1_header(bytes: &[u8; EMB1_HEADER_LEN as usize], path: &Path) -> Result<Emb1Header> {
    if &bytes[0..4] != EMB1_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {:?}, expected \"EMB1\"", &bytes[0..4]),
        ));
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or_else(|| Error::UnsupportedDtype {
        file: path.to_path_buf(),
        code: bytes[4],
    })?;
    if bytes[5] != 2 {
        return Err(Error::format(path, 5, format!("rank {} is not 2", bytes[5])));
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let fits = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size()))
        .is_some_and(|b| b < 1u64 << 63);
    if !fits {
        return Err(Error::DimOverflow {
            file: path.to_path_buf(),
            dims: vec![rows, cols],
        });
    }
    Ok(Emb1Header { dtype, rows, cols })
}

/// Validates an `EMB1` header against the file length without reading the payload.
pub fn inspect_emb1(path: impl AsRef<Path>) -> Result<Emb1Header> {
    let path = path.as_ref();
    let (mut r, len) = open(path)?;
    let bytes = read_header_bytes::<{ EMB1_HEADER_LEN as usize }>(&mut r, path, len)?;
    let header = parse_emb1_header(&bytes, path)?;
    check_length(path, len, EMB1_HEADER_LEN + header.payload_bytes())?;
    Ok(header)
}

fn check_length(path: &Path, actual: u64, expected: u64) -> Result<()> {
    if actual < expected {
        return Err(Error::format(
            path,
            actual,
            format!("truncated payload: file has {actual} bytes, header implies {expected}"),
        ));
    }
    if actual > expected {
        return Err(Error::format(
            path,
            expected,
            format!("{} trailing bytes after payload", actual - expected),
        ));
    }
    Ok(())
}

fn read_emb1_payload(path: &Path, accept: &[Dtype]) -> Result<(Emb1Header, Vec<f64>)> {
    let header = inspect_emb1(path)?;
    if !accept.contains(&header.dtype) {
        return Err(Error::UnsupportedDtype {
            file: path.to_path_buf(),
            code: header.dtype as u8,
        });
    }
    let (mut r, _) = open(path)?;
    let mut skip = [0u8; EMB1_HEADER_LEN as usize];
    r.read_exact(&mut skip).map_err(|e| Error::io(path, e))?;
    let mut payload = vec![0u8; header.payload_bytes() as usize];
    r.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            path,
            EMB1_HEADER_LEN + pos as u64 * header.dtype.size(),
            "non-finite value in payload",
        ));
    }
    Ok((header, values))
}

/// Reads a float32 activation tensor (widened to `f64` without rounding).
pub fn read_emb1(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let (h, values) = read_emb1_payload(path.as_ref(), &[Dtype::F32])?;
    Ok(DenseMatrix::from_raw(h.rows as usize, h.cols as usize, values))
}

/// Reads either dtype; used for checkpoints.
pub fn read_emb1_any(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let (h, values) = read_emb1_payload(path.as_ref(), &[Dtype::F32, Dtype::F64])?;
    Ok(DenseMatrix::from_raw(h.rows as usize, h.cols as usize, values))
}

pub fn write_lbl1(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    if let Some(bad) = labels.iter().find(|l| **l > u32::MAX as usize) {
        return Err(Error::invalid(format!("label {bad} does not fit in u32")));
    }
    write_atomic(path, |w| {
        w.write_all(LBL1_MAGIC)?;
        w.write_all(&(labels.len() as u64).to_le_bytes())?;
        for &l in labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
        Ok(())
    })
}

/// Validates an `LBL1` header against the file length; returns the label count.
pub fn inspect_lbl1(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let (mut r, len) = open(path)?;
    let bytes = read_header_bytes::<{ LBL1_HEADER_LEN as usize }>(&mut r, path, len)?;
    if &bytes[0..4] != LBL1_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {:?}, expected \"LBL1\"", &bytes[0..4]),
        ));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let payload = count
        .checked_mul(4)
        .filter(|b| *b < 1u64 << 63)
        .ok_or_else(|| Error::DimOverflow {
            file: path.to_path_buf(),
            dims: vec![count],
        })?;
    check_length(path, len, LBL1_HEADER_LEN + payload)?;
    Ok(count)
}

pub fn read_lbl1(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let count = inspect_lbl1(path)?;
    let (mut r, _) = open(path)?;
    let mut bytes = Vec::with_capacity((LBL1_HEADER_LEN + count * 4) as usize);
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes[LBL1_HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.emb1");
        write_emb1_f32(&p, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -6.5]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"EMB1");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &3u64.to_le_bytes());
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22 + 24);
        assert!(!dir.path().join("t.emb1.tmp").exists());

        let l = dir.path().join("t.lbl1");
        write_lbl1(&l, &[3, 0, 7]).unwrap();
        let bytes = std::fs::read(&l).unwrap();
        assert_eq!(&bytes[0..4], b"LBL1");
        assert_eq!(&bytes[4..12], &3u64.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(read_lbl1(&l).unwrap(), vec![3, 0, 7]);
    }

    #[test]
    fn rejects_float64_for_activations() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.emb1");
        let m = DenseMatrix::from_rows(&[[0.1, 0.2]]).unwrap();
        write_emb1_f64(&p, &m).unwrap();
        assert!(matches!(read_emb1(&p), Err(Error::UnsupportedDtype { code: 0x02, .. })));
        assert_eq!(read_emb1_any(&p).unwrap(), m);
    }

    #[test]
    fn truncation_and_overflow() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.emb1");
        write_emb1_f32(&p, 4, 4, &[0.5; 16]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..40]).unwrap();
        match inspect_emb1(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 40),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(inspect_emb1(&p), Err(Error::Format { offset: 10, .. })));

        let mut huge = bytes[..22].to_vec();
        huge[6..14].copy_from_slice(&(1u64 << 40).to_le_bytes());
        huge[14..22].copy_from_slice(&(1u64 << 30).to_le_bytes());
        std::fs::write(&p, &huge).unwrap();
        assert!(matches!(inspect_emb1(&p), Err(Error::DimOverflow { .. })));

        let mut bad = bytes.clone();
        bad[5] = 3;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(inspect_emb1(&p), Err(Error::Format { offset: 5, .. })));
        bad[5] = 2;
        bad[4] = 0x07;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            inspect_emb1(&p),
            Err(Error::UnsupportedDtype { code: 0x07, .. })
        ));
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(inspect_emb1(&p), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn f32_roundtrip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.emb1");
            let values: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            write_emb1_f32(&p, rows, cols, &values).unwrap();
            let back = read_emb1(&p).unwrap();
            prop_assert_eq!(back.shape(), (rows, cols));
            for (a, b) in back.data().iter().zip(&values) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
        }
    }
}
