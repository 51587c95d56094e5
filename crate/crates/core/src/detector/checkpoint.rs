//! Versioned binary checkpoints: magic, format version, architecture
//! descriptor, EM iteration, then little-endian f32 blobs for weights,
//! running statistics and the Adam moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::adam::AdamState;
use super::network::{DetectorParams, Layout, ARCH_DESCRIPTOR};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KEYREPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DetectorParams,
    pub adam: AdamState,
    /// Number of completed EM iterations.
    pub iteration: u32,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl Checkpoint {
    /// Round every stored quantity to f32 so that a save/load cycle is
    /// lossless.
    pub fn quantize(params: &mut DetectorParams, adam: &mut AdamState) {
        round_f32(&mut params.weights);
        round_f32(&mut params.running);
        round_f32(&mut adam.m);
        round_f32(&mut adam.v);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(ARCH_DESCRIPTOR.len() as u32).to_le_bytes());
        out.extend_from_slice(ARCH_DESCRIPTOR.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        for blob in [&self.params.weights, &self.params.running, &self.adam.m, &self.adam.v] {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            for &x in blob.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::malformed(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::malformed(path, format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let descriptor = String::from_utf8_lossy(r.take(n)?).into_owned();
        if descriptor != ARCH_DESCRIPTOR {
            return Err(Error::ArchitectureMismatch {
                expected: ARCH_DESCRIPTOR.into(),
                found: descriptor,
            });
        }
        let iteration = r.u32()?;
        let step = r.u64()?;
        let lay = Layout::get();
        let weights = r.blob(lay.n_weights)?;
        let running = r.blob(lay.n_running)?;
        let m = r.blob(lay.n_weights)?;
        let v = r.blob(lay.n_weights)?;
        if r.pos != bytes.len() {
            return Err(Error::malformed(path, "trailing bytes"));
        }
        let params = DetectorParams { weights, running };
        params.validate()?;
        Ok(Self {
            params,
            adam: AdamState { m, v, step },
            iteration,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed(self.path, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::ArchitectureMismatch {
                expected: format!("{expected} values"),
                found: format!("{n} values"),
            });
        }
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::malformed(self.path, "blob size"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

/// Write atomically: a temporary sibling is written, synced and renamed.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::network::forward;
    use crate::raster::Plane;

    fn quantized(seed: u64) -> Checkpoint {
        let mut params = DetectorParams::init(seed);
        let mut adam = AdamState::new(params.weights.len());
        adam.m.iter_mut().enumerate().for_each(|(i, m)| *m = (i as f64).sin() * 1e-3);
        adam.v.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).cos().powi(2) * 1e-6);
        adam.step = 17;
        Checkpoint::quantize(&mut params, &mut adam);
        Checkpoint { params, adam, iteration: 2 }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iter_002.ckpt");
        let ck = quantized(4);
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let img = Plane::from_fn(32, 24, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        let a = forward(&img, &ck.params).unwrap();
        let b = forward(&img, &back.params).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(!path.with_extension("ckpt.tmp").exists());
    }

    #[test]
    fn rejects_other_architecture() {
        let ck = quantized(1);
        let mut bytes = ck.to_bytes();
        // flip one descriptor byte
        bytes[16] ^= 0x20;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::ArchitectureMismatch { .. }));
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = quantized(1).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("x")).unwrap_err(),
            Error::Malformed { .. }
        ));
    }
}
