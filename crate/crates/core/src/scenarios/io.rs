//! Flat binary dataset files.
//!
//! ```text
//! "MITADAT1"
//! u64 n, u64 d, u64 K                 little-endian
//! f64 x n*d                           samples, row-major
//! u32 x n                             labels
//! u8  x n                             tags (0 = A, 1 = B)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DistTag, LabeledBatch, ScenarioError};
use crate::batch::Batch;

pub const DATASET_MAGIC: &[u8; 8] = b"MITADAT1";

pub fn encode_dataset(data: &LabeledBatch, num_classes: usize) -> Vec<u8> {
    let n = data.len();
    let mut out = Vec::with_capacity(32 + n * (8 * data.x.cols() + 5));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [n, data.x.cols(), num_classes] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in data.x.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &data.y_hidden {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out.extend(data.tags.iter().map(|t| match t {
        DistTag::A => 0u8,
        DistTag::B => 1u8,
    }));
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(LabeledBatch, usize), ScenarioError> {
    let bad = |m: &str| ScenarioError::Format(m.to_string());
    if bytes.len() < 32 || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
    let (n, d, k) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(8))
        .and_then(|b| b.checked_add(n.checked_mul(5)?))
        .and_then(|b| b.checked_add(32))
        .ok_or_else(|| bad("size overflow"))?;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut pos = 32;
    let xs = bytes[pos..pos + 8 * n * d]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    pos += 8 * n * d;
    let labels: Vec<usize> = bytes[pos..pos + 4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    pos += 4 * n;
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(bad(&format!("label {y} >= K = {k}")));
    }
    let tags = bytes[pos..]
        .iter()
        .map(|&t| match t {
            0 => Ok(DistTag::A),
            1 => Ok(DistTag::B),
            other => Err(bad(&format!("unknown tag byte {other}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let x = Batch::from_vec(n, d, xs).map_err(|e| bad(&e.to_string()))?;
    Ok((LabeledBatch::new(x, labels, tags)?, k))
}

pub fn write_dataset(path: &Path, data: &LabeledBatch, num_classes: usize) -> Result<(), ScenarioError> {
    fs::write(path, encode_dataset(data, num_classes))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(LabeledBatch, usize), ScenarioError> {
    decode_dataset(&fs::read(path)?)
}

/// Inspection export: `x0,..,x{d-1},label,tag`.
pub fn write_csv<W: Write>(data: &LabeledBatch, mut out: W) -> Result<(), ScenarioError> {
    let d = data.x.cols();
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["label".into(), "tag".into()]).collect();
    writeln!(out, "{}", header.join(","))?;
    for ((row, y), t) in data.x.iter_rows().zip(&data.y_hidden).zip(&data.tags) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{y},{t:?}", vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledBatch {
        LabeledBatch::new(
            Batch::from_rows(&[[0.5, -1.0], [2.0, 3.25], [0.0, 1e-9]]),
            vec![0, 2, 1],
            vec![DistTag::A, DistTag::B, DistTag::A],
        )
        .unwrap()
    }

    #[test]
    fn binary_layout() {
        let bytes = encode_dataset(&sample(), 3);
        assert_eq!(&bytes[..8], b"MITADAT1");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 32 + 48 + 12 + 3);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 1, 0]);
        let (back, k) = decode_dataset(&bytes).unwrap();
        assert_eq!((back, k), (sample(), 3));
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = encode_dataset(&sample(), 3);
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_dataset(&encode_dataset(&sample(), 2)).is_err());
        let mut t = bytes.clone();
        *t.last_mut().unwrap() = 7;
        assert!(decode_dataset(&t).is_err());
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        write_csv(&sample(), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "x0,x1,label,tag");
        assert_eq!(s.lines().nth(2).unwrap(), "2,3.25,2,B");
    }
}
