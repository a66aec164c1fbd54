//! Binary tensor records used by checkpoints.
//!
//! Layout (all little-endian): `u32` name length, UTF-8 name, `u8` dtype tag
//! (0 = f32, 1 = f64), `u32` rank, one `u64` per extent, raw element data.

use std::io::{Read, Write};

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub fn write_record<E: Element, W: Write>(w: &mut W, name: &str, t: &Tensor<E>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + name.len() + t.numel() * E::DTYPE.size_bytes());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(E::DTYPE.tag());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated tensor record".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
}

/// Reads one record, converting the stored dtype to `E` when they differ.
pub fn read_record<E: Element, R: Read>(r: &mut R) -> Result<(String, Tensor<E>)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(Error::Checkpoint(format!("implausible tensor name length {name_len}")));
    }
    let name = String::from_utf8(read_exact(r, name_len)?)
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let tag = read_exact(r, 1)?[0];
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag} for `{name}`")))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {rank} for `{name}`")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let width = dtype.size_bytes();
    let raw = read_exact(r, numel * width)?;
    let data: Vec<E> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| E::of(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| E::of(f64::read_le(c))).collect(),
    };
    Ok((name, Tensor::new(shape, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::new([2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, "ab", &t).unwrap();
        let mut expect = vec![2, 0, 0, 0, b'a', b'b', 0, 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0];
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let t = Tensor::<f64>::ones([3]);
        let mut buf = Vec::new();
        write_record(&mut buf, "x", &t).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_record::<f64, _>(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip(name in "[a-z.0-9]{1,20}", shape in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f64>::randn(shape, 1.0, &mut rng);
            let mut buf = Vec::new();
            write_record(&mut buf, &name, &t).unwrap();
            let (n2, t2) = read_record::<f64, _>(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(n2, name);
            prop_assert!(t2.bit_eq(&t));
        }
    }
}
