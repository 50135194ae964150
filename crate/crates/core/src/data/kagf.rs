//! KAGF feature files: `"KAGF"`, u16 version, u8 rank, rank × u32 extents,
//! then the row-major little-endian f32 payload.

use std::fs;
use std::path::Path;

use crate::error::{KagsError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KAGF";
pub const VERSION: u16 = 1;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> KagsError {
    KagsError::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 7 {
        return Err(fmt_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt_err(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(fmt_err(6, "rank must be positive"));
    }
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt_err(bytes.len(), format!("truncated extents: need {header} header bytes")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let o = 7 + 4 * i;
        let e = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        if e == 0 {
            return Err(fmt_err(o, "zero extent"));
        }
        count = count
            .checked_mul(e)
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| fmt_err(o, "extent product overflows"))?;
        shape.push(e);
    }
    let expected = count * 4;
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(fmt_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(fmt_err(
            header + expected,
            format!("{} trailing bytes after payload", actual - expected),
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_feature_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| KagsError::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| KagsError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        KagsError::Format { offset, msg } => KagsError::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"KAGF");
        assert_eq!(&b[4..7], &[1, 0, 2]);
        assert_eq!(&b[7..15], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn bad_magic() {
        let mut b = encode(&Tensor::zeros(&[2]));
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&b), Err(KagsError::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_names_byte_counts() {
        let b = encode(&Tensor::zeros(&[3, 2]));
        let err = decode(&b[..b.len() - 5]).unwrap_err().to_string();
        assert!(err.contains("expected 24 bytes, found 19"), "{err}");
    }

    #[test]
    fn overflowing_extents() {
        let mut b = Vec::new();
        b.extend_from_slice(b"KAGF");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(4);
        for _ in 0..4 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode(&b).unwrap_err().to_string().contains("overflow"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u64).wrapping_mul(2654435761).wrapping_add(i as u64 * 97) as u32 & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
