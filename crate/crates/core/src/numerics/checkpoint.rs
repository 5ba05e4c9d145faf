//! `TSCK` checkpoint files.
//!
//! Layout (little-endian): magic `TSCK`, `u16` format version, `u64` config
//! length, UTF-8 JSON config, `u64` record count, then per record: `u32`
//! name length, UTF-8 name, `u32` rank, `rank × u64` dims, `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"TSCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON text, stored verbatim.
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub(crate) fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub(crate) fn read_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Format("truncated file".into()));
    }
    Ok(buf)
}

impl Checkpoint {
    pub fn new(config: impl Into<String>, tensors: Vec<(String, Tensor<f32>)>) -> Self {
        Self { config: config.into(), tensors }
    }

    pub fn config_json<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_str(&self.config)?)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != MAGIC {
            return Err(Error::Format("not a TSCK checkpoint".into()));
        }
        let version = u16::from_le_bytes(read_exact(r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let clen = u64::from_le_bytes(read_exact(r)?) as usize;
        let config = String::from_utf8(read_vec(r, clen)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let count = u64::from_le_bytes(read_exact(r)?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = u32::from_le_bytes(read_exact(r)?) as usize;
            let name = String::from_utf8(read_vec(r, nlen)?).map_err(|_| Error::Format("name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = read_vec(r, n * 4)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { config, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::read_from(&mut &b"XXXX\x01\x00"[..]).is_err());
        let ck = Checkpoint::new("{}", vec![("w".into(), Tensor::ones(vec![2, 3]))]);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::new("{\"a\":1}", vec![]);
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"TSCK");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u64::from_le_bytes(b[6..14].try_into().unwrap()), 7);
        assert_eq!(&b[14..21], b"{\"a\":1}");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u32>(), 0..64),
            name in "[a-z.]{1,12}",
        ) {
            // arbitrary bit patterns, NaN payloads included
            let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let n = vals.len();
            let ck = Checkpoint::new("{\"seed\":3}", vec![(name, Tensor::new(vec![n], vals).unwrap())]);
            let back = Checkpoint::read_from(&mut ck.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back.to_bytes(), ck.to_bytes());
            let a: Vec<u32> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, bits);
        }
    }
}
