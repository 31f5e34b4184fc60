//! The FDT1 tensor container.
//!
//! Layout: magic `FDT1`, one dtype byte (`0x00` = little-endian f64), one rank
//! byte, two zero bytes, `rank` little-endian u64 extents, then the row-major
//! payload. No padding, no compression.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FDT1";
pub const DTYPE_F64_LE: u8 = 0x00;

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format { field, detail: detail.into() }
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(fmt_err("rank", format!("rank {} exceeds 255", t.rank())));
    }
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(DTYPE_F64_LE);
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(fmt_err("magic", "file shorter than magic"));
    }
    if bytes[..4] != MAGIC {
        return Err(fmt_err("magic", format!("expected FDT1, found {:02x?}", &bytes[..4])));
    }
    let dtype = *bytes.get(4).ok_or_else(|| fmt_err("dtype", "truncated header"))?;
    if dtype != DTYPE_F64_LE {
        return Err(fmt_err("dtype", format!("unsupported dtype code {dtype:#04x}")));
    }
    let rank = *bytes.get(5).ok_or_else(|| fmt_err("rank", "truncated header"))? as usize;
    let reserved = bytes.get(6..8).ok_or_else(|| fmt_err("reserved", "truncated header"))?;
    if reserved != [0, 0] {
        return Err(fmt_err("reserved", format!("expected zero bytes, found {reserved:02x?}")));
    }
    let ext_end = 8 + 8 * rank;
    let ext = bytes
        .get(8..ext_end)
        .ok_or_else(|| fmt_err("extents", format!("need {} extent bytes", 8 * rank)))?;
    let dims: Vec<usize> = ext
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt_err("extents", "element count overflows"))?;
    let payload = &bytes[ext_end..];
    if payload.len() != 8 * n {
        return Err(fmt_err(
            "payload",
            format!("expected {} bytes for {n} elements, found {}", 8 * n, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tensor_is_header_only() {
        let t = Tensor::new(vec![0], vec![]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn small_payload_layout() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..8], &[0x46, 0x44, 0x54, 0x31, 0x00, 0x02, 0, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &3u64.to_le_bytes());
        assert_eq!(b.len(), 24 + 48);
        assert_eq!(&b[24 + 40..], &5.0f64.to_le_bytes());
    }

    #[test]
    fn errors_name_field() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let good = encode(&t).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { field: "magic", .. })));

        let mut bad = good.clone();
        bad[4] = 0x07;
        assert!(matches!(decode(&bad), Err(Error::Format { field: "dtype", .. })));

        let bad = &good[..good.len() - 3];
        assert!(matches!(decode(bad), Err(Error::Format { field: "payload", .. })));

        let bad = &good[..10];
        assert!(matches!(decode(bad), Err(Error::Format { field: "extents", .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fdt");
        let t = Tensor::new(vec![5, 4, 8, 8], (0..1280).map(|i| (i as f64).sin()).collect())
            .unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(encode(&back).unwrap(), encode(&t).unwrap());
    }
}
