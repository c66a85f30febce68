//! Flat binary tensor format:
//!
//! ```text
//! "DIR3DTEN" | u8 precision (4|8) | u32 rank | rank * u64 extents | LE scalars
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"DIR3DTEN";

pub fn write_tensor_to<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::TAG);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Reads one tensor from the front of `bytes`, advancing the slice.
/// Errors carry `origin` as their path.
pub fn read_tensor_from<T: Element>(bytes: &mut &[u8], origin: &Path) -> Result<Tensor<T>> {
    let fail = |msg: &str| Error::format(origin, msg);
    let magic = take(bytes, 8).ok_or_else(|| fail("truncated tensor magic"))?;
    if magic != TENSOR_MAGIC {
        return Err(fail("bad tensor magic"));
    }
    let tag = take(bytes, 1).ok_or_else(|| fail("truncated precision tag"))?[0];
    if tag != T::TAG {
        return Err(fail(&format!(
            "precision tag {tag} does not match expected {}",
            T::TAG
        )));
    }
    let rank = u32::from_le_bytes(
        take(bytes, 4)
            .ok_or_else(|| fail("truncated rank"))?
            .try_into()
            .expect("4 bytes"),
    ) as usize;
    if rank > 16 {
        return Err(fail(&format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u64::from_le_bytes(
            take(bytes, 8)
                .ok_or_else(|| fail("truncated extents"))?
                .try_into()
                .expect("8 bytes"),
        );
        shape.push(usize::try_from(e).map_err(|_| fail("extent overflow"))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| fail("element count overflow"))?;
    let width = T::TAG as usize;
    let raw = take(bytes, numel.checked_mul(width).ok_or_else(|| fail("size overflow"))?)
        .ok_or_else(|| fail("truncated tensor data"))?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| fail(&e.to_string()))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if bytes.len() < n {
        return None;
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Some(head)
}

pub fn write_tensor<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor_to(&mut buf, t);
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut slice = buf.as_slice();
    let t = read_tensor_from(&mut slice, path)?;
    if !slice.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t);
        assert_eq!(&buf[..8], b"DIR3DTEN");
        assert_eq!(buf[8], 4);
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[13..21], &2u64.to_le_bytes());
        assert_eq!(&buf[21..29], &1u64.to_le_bytes());
        assert_eq!(&buf[29..33], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 37);
    }

    #[test]
    fn truncation_and_precision_are_reported() {
        let t = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t);
        for cut in [0, 5, 12, 20, buf.len() - 1] {
            let mut s = &buf[..cut];
            assert!(matches!(
                read_tensor_from::<f64>(&mut s, Path::new("mem")),
                Err(Error::Format { .. })
            ));
        }
        let mut s = buf.as_slice();
        assert!(read_tensor_from::<f32>(&mut s, Path::new("mem")).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::<f64>::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t);
            let mut s = buf.as_slice();
            let back = read_tensor_from::<f64>(&mut s, Path::new("mem")).unwrap();
            prop_assert!(back.bit_eq(&t));
            prop_assert!(s.is_empty());
        }
    }
}
