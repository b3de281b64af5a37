//! Little-endian tensor blob:
//!
//! ```text
//! "KVT1" | dtype: u32 (1 = f32, 2 = f64) | rank: u32 | dims: u64 × rank | payload
//! ```

use super::{numel, Precision, Scalar};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"KVT1";

pub fn encode_blob<T: Scalar>(shape: &[usize], data: &[T]) -> Vec<u8> {
    debug_assert_eq!(numel(shape), data.len());
    let mut out = Vec::with_capacity(12 + 8 * shape.len() + data.len() * T::PRECISION.byte_width());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&T::PRECISION.code().to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(format!("bad tensor blob: {}", detail.into()))
}

/// Decodes a blob into `T`, converting from the stored precision if needed.
pub fn decode_blob<T: Scalar>(bytes: &[u8]) -> Result<(Vec<usize>, Vec<T>)> {
    let take = |at: usize, n: usize| {
        bytes
            .get(at..at + n)
            .ok_or_else(|| corrupt(format!("truncated at byte {at}")))
    };
    let magic = take(0, 4)?;
    if magic != BLOB_MAGIC {
        return Err(corrupt(format!("magic {magic:?}, expected {BLOB_MAGIC:?}")));
    }
    let code = u32::from_le_bytes(take(4, 4)?.try_into().expect("4 bytes"));
    let precision = Precision::from_code(code).ok_or_else(|| corrupt(format!("dtype code {code}")))?;
    let rank = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes")) as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u64::from_le_bytes(take(12 + 8 * i, 8)?.try_into().expect("8 bytes"));
        shape.push(d as usize);
    }
    let start = 12 + 8 * rank;
    let width = precision.byte_width();
    let n = numel(&shape);
    let payload = take(start, n * width)?;
    if bytes.len() != start + n * width {
        return Err(corrupt(format!(
            "{} trailing bytes",
            bytes.len() - start - n * width
        )));
    }
    let data = match precision {
        p if p == T::PRECISION => payload.chunks_exact(width).map(T::read_le).collect(),
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of(f32::read_le(c) as f64))
            .collect(),
        Precision::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let b = encode_blob::<f32>(&[2, 1], &[1.0, -2.0]);
        assert_eq!(&b[..4], b"KVT1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        assert_eq!(&b[20..28], &1u64.to_le_bytes());
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 36);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut b = encode_blob::<f64>(&[3], &[1.0, 2.0, 3.0]);
        assert!(decode_blob::<f64>(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode_blob::<f64>(&b).is_err());
    }

    #[test]
    fn f32_blob_widens_exactly() {
        let b = encode_blob::<f32>(&[2], &[0.1, 3.5]);
        let (_, d) = decode_blob::<f64>(&b).unwrap();
        assert_eq!(d, vec![0.1f32 as f64, 3.5]);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) as f64).sin() * 1e3).collect();
            let (shape, back) = decode_blob::<f64>(&encode_blob(&dims, &data)).unwrap();
            prop_assert_eq!(shape, dims);
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
