//! `TSLF` latent store: `"TSLF"`, `u64` record count, then per record a
//! `u64` video key, `u32` frame index and the latent as little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::LATENT_DIM;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{read_exact, read_vec};

const MAGIC: &[u8; 4] = b"TSLF";

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub video_key: u64,
    pub frame_index: u32,
    pub values: Vec<f32>,
}

pub fn write_latents(w: &mut impl Write, records: &[LatentRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        if r.values.len() != LATENT_DIM {
            return Err(Error::Shape(format!("latent of {} values, {LATENT_DIM} expected", r.values.len())));
        }
        w.write_all(&r.video_key.to_le_bytes())?;
        w.write_all(&r.frame_index.to_le_bytes())?;
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_latents(r: &mut impl Read) -> Result<Vec<LatentRecord>> {
    if &read_exact::<4>(r)? != MAGIC {
        return Err(Error::Format("not a latent store (bad magic)".into()));
    }
    let count = u64::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let video_key = u64::from_le_bytes(read_exact(r)?);
        let frame_index = u32::from_le_bytes(read_exact(r)?);
        let raw = read_vec(r, LATENT_DIM * 4)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(LatentRecord { video_key, frame_index, values });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after latent records".into()));
    }
    Ok(out)
}

/// Latents indexed by `(video key, frame index)`.
#[derive(Clone, Debug, Default)]
pub struct LatentStore {
    records: Vec<LatentRecord>,
    index: HashMap<(u64, u32), usize>,
}

impl LatentStore {
    pub fn new(records: Vec<LatentRecord>) -> Self {
        let index = records.iter().enumerate().map(|(i, r)| ((r.video_key, r.frame_index), i)).collect();
        Self { records, index }
    }

    pub fn get(&self, video_key: u64, frame_index: u32) -> Option<&[f32]> {
        self.index.get(&(video_key, frame_index)).map(|&i| &self.records[i].values[..])
    }

    pub fn records(&self) -> &[LatentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_latents(&mut w, &self.records)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_latents(&mut BufReader::new(fs::File::open(path)?))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            recs in proptest::collection::vec((any::<u64>(), any::<u32>(), proptest::collection::vec(any::<u32>(), LATENT_DIM)), 0..5)
        ) {
            let records: Vec<LatentRecord> = recs
                .into_iter()
                .map(|(k, f, bits)| LatentRecord { video_key: k, frame_index: f, values: bits.into_iter().map(f32::from_bits).collect() })
                .collect();
            let mut buf = Vec::new();
            write_latents(&mut buf, &records).unwrap();
            prop_assert_eq!(buf.len(), 12 + records.len() * (12 + 4 * LATENT_DIM));
            let back = read_latents(&mut &buf[..]).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!((a.video_key, a.frame_index), (b.video_key, b.frame_index));
                prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn malformed_input_rejected() {
        assert!(read_latents(&mut &b"TSLX\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_latents(&mut buf, &[LatentRecord { video_key: 1, frame_index: 2, values: vec![0.5; LATENT_DIM] }]).unwrap();
        assert!(read_latents(&mut &buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_latents(&mut &buf[..]).is_err());
        assert!(write_latents(&mut Vec::new(), &[LatentRecord { video_key: 0, frame_index: 0, values: vec![0.0; 3] }]).is_err());
    }

    #[test]
    fn store_lookup() {
        let store = LatentStore::new(vec![LatentRecord { video_key: 7, frame_index: 3, values: vec![1.0; LATENT_DIM] }]);
        assert_eq!(store.get(7, 3).unwrap()[0], 1.0);
        assert!(store.get(7, 4).is_none());
    }
}
