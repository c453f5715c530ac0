//! NPY v1.0 reader and writer.
//!
//! Scope is deliberately narrow: version 1.0, C order, little-endian `<f4`
//! or `<f8` payloads. The writer emits the same layout NumPy does (header
//! dict padded with spaces so the payload starts on a 64-byte boundary,
//! terminated by a newline), so files round-trip bit-exactly and load in any
//! standard reader.

use std::fs;
use std::path::Path;

use super::{DType, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Serialize to NPY v1.0 bytes.
pub fn tensor_to_npy_bytes(t: &Tensor) -> Vec<u8> {
    let descr = match t.dtype() {
        DType::F32 => "<f4",
        DType::F64 => "<f8",
    };
    let shape = t.shape();
    let mut shape_str = String::from("(");
    for (i, e) in shape.iter().enumerate() {
        if i > 0 {
            shape_str.push_str(", ");
        }
        shape_str.push_str(&e.to_string());
    }
    if shape.len() == 1 {
        shape_str.push(',');
    }
    shape_str.push(')');

    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}");
    // magic(6) + version(2) + header_len(2) + header + '\n' padded to 64.
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + t.len() * t.dtype().item_size());
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match t.dtype() {
        DType::F32 => {
            for &x in t.as_f32().expect("dtype checked") {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        DType::F64 => {
            for &x in t.as_f64().expect("dtype checked") {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

/// Parse NPY v1.0 bytes into a tensor. 0-d files load as shape `[1]`.
pub fn tensor_from_npy_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 {
        return Err(Error::Format("npy: truncated preamble".into()));
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::Format("npy: bad magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Unsupported(format!(
            "npy: version {major}.{minor} (only 1.0 supported)"
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_start = 10usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Format("npy: header length overflows".into()))?;
    if payload_start > bytes.len() {
        return Err(Error::Format("npy: truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[10..payload_start])
        .map_err(|_| Error::Format("npy: header is not valid UTF-8".into()))?;

    let (descr, fortran, mut shape) = parse_header_dict(header)?;
    let dtype = match descr.as_str() {
        "<f4" => DType::F32,
        "<f8" => DType::F64,
        other => {
            return Err(Error::Unsupported(format!(
                "npy: dtype '{other}' (only <f4 and <f8 supported)"
            )))
        }
    };
    if fortran {
        return Err(Error::Unsupported("npy: fortran order not supported".into()));
    }
    if shape.is_empty() {
        shape = vec![1];
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Format("npy: zero extent in shape".into()));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("npy: shape overflows".into()))?;
    let expected = count
        .checked_mul(dtype.item_size())
        .ok_or_else(|| Error::Format("npy: payload size overflows".into()))?;
    let payload = &bytes[payload_start..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "npy: payload is {} bytes, header says {}",
            payload.len(),
            expected
        )));
    }

    match dtype {
        DType::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_f32(shape, data)
        }
        DType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Tensor::from_f64(shape, data)
        }
    }
    .map_err(|e| Error::Format(format!("npy: {e}")))
}

/// Read a tensor from an NPY file.
pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    tensor_from_npy_bytes(&bytes)
}

/// Write a tensor as an NPY file.
pub fn write_npy(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), tensor_to_npy_bytes(t)).map_err(|e| Error::io(path.as_ref(), e))
}

/// Extract `descr`, `fortran_order` and `shape` from the header dict.
/// Tolerates arbitrary whitespace, key order, and extra keys.
fn parse_header_dict(header: &str) -> Result<(String, bool, Vec<usize>)> {
    let s = header.trim();
    let inner = s
        .strip_prefix('{')
        .and_then(|rest| rest.trim_end().strip_suffix('}'))
        .ok_or_else(|| Error::Format("npy: header is not a dict".into()))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;

    let mut rest = inner.trim_start();
    while !rest.is_empty() {
        // key
        let quote = rest
            .chars()
            .next()
            .filter(|&q| q == '\'' || q == '"')
            .ok_or_else(|| Error::Format("npy: expected quoted key".into()))?;
        let after = &rest[1..];
        let end = after
            .find(quote)
            .ok_or_else(|| Error::Format("npy: unterminated key".into()))?;
        let key = &after[..end];
        rest = after[end + 1..].trim_start();
        rest = rest
            .strip_prefix(':')
            .ok_or_else(|| Error::Format("npy: expected ':' after key".into()))?
            .trim_start();

        // value: quoted string, parenthesized tuple, or bare token
        let value;
        if let Some(q) = rest.chars().next().filter(|&q| q == '\'' || q == '"') {
            let after = &rest[1..];
            let end = after
                .find(q)
                .ok_or_else(|| Error::Format("npy: unterminated string value".into()))?;
            value = after[..end].to_string();
            rest = after[end + 1..].trim_start();
        } else if rest.starts_with('(') {
            let end = rest
                .find(')')
                .ok_or_else(|| Error::Format("npy: unterminated tuple".into()))?;
            value = rest[..=end].to_string();
            rest = rest[end + 1..].trim_start();
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            value = rest[..end].trim().to_string();
            rest = rest[end..].trim_start();
        }
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();

        match key {
            "descr" => descr = Some(value),
            "fortran_order" => {
                fortran = Some(match value.as_str() {
                    "True" => true,
                    "False" => false,
                    other => {
                        return Err(Error::Format(format!(
                            "npy: fortran_order must be True or False, got '{other}'"
                        )))
                    }
                })
            }
            "shape" => shape = Some(parse_shape_tuple(&value)?),
            _ => {} // ignore unknown keys
        }
    }

    Ok((
        descr.ok_or_else(|| Error::Format("npy: header missing 'descr'".into()))?,
        fortran.ok_or_else(|| Error::Format("npy: header missing 'fortran_order'".into()))?,
        shape.ok_or_else(|| Error::Format("npy: header missing 'shape'".into()))?,
    ))
}

fn parse_shape_tuple(s: &str) -> Result<Vec<usize>> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| Error::Format("npy: shape is not a tuple".into()))?;
    let mut out = Vec::new();
    for tok in inner.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue; // trailing comma or empty tuple
        }
        let e: usize = tok
            .parse()
            .map_err(|_| Error::Format(format!("npy: bad shape entry '{tok}'")))?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256StarStar;
    use proptest::prelude::*;

    /// Hand-assembled 2x3 <f4 file with values 0..5.
    fn known_file() -> Vec<u8> {
        let header = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }";
        let unpadded = 10 + header.len() + 1;
        let pad = (64 - unpadded % 64) % 64;
        let mut h = header.to_string();
        h.extend(std::iter::repeat_n(' ', pad));
        h.push('\n');
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
        bytes.extend_from_slice(&(h.len() as u16).to_le_bytes());
        bytes.extend_from_slice(h.as_bytes());
        for i in 0..6 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        bytes
    }

    #[test]
    fn reads_known_bytes() {
        let t = tensor_from_npy_bytes(&known_file()).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.dtype(), DType::F32);
        assert_eq!(t.to_f64_vec(), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn writer_output_matches_known_bytes() {
        let t = Tensor::from_f32(vec![2, 3], (0..6).map(|x| x as f32).collect()).unwrap();
        assert_eq!(tensor_to_npy_bytes(&t), known_file());
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = known_file();
        bytes[0] = 0x94;
        match tensor_from_npy_bytes(&bytes) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    /// Replace `from` with `to` (same length) inside the header bytes only.
    fn patch_header(mut bytes: Vec<u8>, from: &str, to: &str) -> Vec<u8> {
        assert_eq!(from.len(), to.len());
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let header = &mut bytes[10..10 + header_len];
        let pos = header
            .windows(from.len())
            .position(|w| w == from.as_bytes())
            .expect("pattern present");
        header[pos..pos + to.len()].copy_from_slice(to.as_bytes());
        bytes
    }

    #[test]
    fn fortran_order_is_unsupported() {
        let bytes = patch_header(known_file(), "False", "True ");
        match tensor_from_npy_bytes(&bytes) {
            Err(Error::Unsupported(_)) => {}
            other => panic!("expected unsupported error, got {other:?}"),
        }
    }

    #[test]
    fn integer_dtype_is_unsupported() {
        let bytes = patch_header(known_file(), "<f4", "<i4");
        match tensor_from_npy_bytes(&bytes) {
            Err(Error::Unsupported(_)) => {}
            other => panic!("expected unsupported error, got {other:?}"),
        }
    }

    #[test]
    fn version_2_is_unsupported() {
        let mut bytes = known_file();
        bytes[6] = 2;
        assert!(matches!(
            tensor_from_npy_bytes(&bytes),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut bytes = known_file();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(tensor_from_npy_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn scalar_shaped_tensor_has_one_payload_float() {
        let t = Tensor::from_f64(vec![1], vec![0.0]).unwrap();
        let bytes = tensor_to_npy_bytes(&t);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        // payload starts on a 64-byte boundary and holds exactly one f64
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes.len() - (10 + header_len), 8);
        let back = tensor_from_npy_bytes(&bytes).unwrap();
        assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn zero_d_file_loads_as_shape_1() {
        let good = known_file();
        let header_len = u16::from_le_bytes([good[8], good[9]]) as usize;
        let preamble = 10 + header_len;
        let mut bytes = patch_header(good[..preamble].to_vec(), "(2, 3)", "()    ");
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        let t = tensor_from_npy_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.flat(0), 1.5);
    }

    #[test]
    fn roundtrip_100_seeded_tensors_bit_exact() {
        let mut rng = Xoshiro256StarStar::seeded(0xBEEF);
        for case in 0..100 {
            let rank = 1 + rng.below(3);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(6)).collect();
            let n: usize = shape.iter().product();
            if case % 2 == 0 {
                let data: Vec<f32> = (0..n).map(|_| rng.uniform(-1e6, 1e6) as f32).collect();
                let t = Tensor::from_f32(shape, data).unwrap();
                let back = tensor_from_npy_bytes(&tensor_to_npy_bytes(&t)).unwrap();
                assert!(back.bitwise_eq(&t), "case {case}");
            } else {
                let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1e12, 1e12)).collect();
                let t = Tensor::from_f64(shape, data).unwrap();
                let back = tensor_from_npy_bytes(&tensor_to_npy_bytes(&t)).unwrap();
                assert!(back.bitwise_eq(&t), "case {case}");
            }
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        let t = Tensor::from_f64(vec![3, 2], vec![1.0, -2.0, 3.5, 0.0, f64::MIN, f64::MAX]).unwrap();
        write_npy(&t, &path).unwrap();
        let back = read_npy(&path).unwrap();
        assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_npy("/nonexistent/definitely/missing.npy").unwrap_err();
        assert!(err.to_string().contains("missing.npy"));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in proptest::collection::vec(1usize..5, 1..4),
                                  seed in any::<u64>(),
                                  use_f32 in any::<bool>()) {
            let n: usize = shape.iter().product();
            let mut rng = Xoshiro256StarStar::seeded(seed);
            let t = if use_f32 {
                let data: Vec<f32> = (0..n).map(|_| rng.uniform(-1e30, 1e30) as f32).collect();
                Tensor::from_f32(shape, data).unwrap()
            } else {
                let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1e30, 1e30)).collect();
                Tensor::from_f64(shape, data).unwrap()
            };
            let back = tensor_from_npy_bytes(&tensor_to_npy_bytes(&t)).unwrap();
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}
