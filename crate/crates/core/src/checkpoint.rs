//! Single-file little-endian checkpoint container.
//!
//! Layout: 16-byte header (`FITVIDCKPT`, two zero bytes, `u32` version),
//! then step, config fingerprint and text, rng state, named parameters,
//! Adam moments and normalisation buffers. Strings and arrays are
//! length-prefixed.

use std::fs;
use std::io::Write;
use std::path::Path;

use fitvid_tensor::{Element, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::FitVid;
use crate::params::ParamStore;
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"FITVIDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Element> {
    pub step: u64,
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub opt: AdamState<T>,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<T: Element>(&mut self, t: &Tensor<T>) {
        self.str(T::DTYPE);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            if T::DTYPE == "f32" {
                self.0.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            } else {
                self.0.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedPayload(format!(
                "checkpoint ends at byte {}, needed {} more",
                self.buf.len(),
                n - (self.buf.len() - self.pos)
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::TruncatedPayload(format!("length {n} exceeds file size")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Inconsistent("invalid utf-8 string".into()))
    }
    fn tensor<T: Element>(&mut self) -> Result<Tensor<T>> {
        let dtype = self.str()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match dtype.as_str() {
            "f32" => self
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            "f64" => self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => return Err(Error::Inconsistent(format!("unknown dtype {other:?}"))),
        };
        Ok(Tensor::from_vec(&shape, data))
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.step);
        w.str(&self.config.fingerprint());
        w.str(&self.config.to_text());
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for id in self.params.ids() {
            w.str(self.params.name(id));
            w.tensor(self.params.get(id));
        }
        w.u64(self.opt.step);
        for (m, v) in self.opt.m.iter().zip(&self.opt.v) {
            w.tensor(m);
            w.tensor(v);
        }
        w.u64(self.params.buffer_len() as u64);
        for id in self.params.buffer_ids() {
            w.str(self.params.buffer_name(id));
            let b = self.params.buffer(id);
            w.u64(b.len() as u64);
            for &x in b {
                w.0.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.0
    }

    /// Parses a checkpoint and rebuilds the model it belongs to. When
    /// `expected` is given its fingerprint must match the stored one.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(FitVid, Self)> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(12).map_err(|_| Error::BadMagic("checkpoint"))? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic("checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let step = r.u64()?;
        let fingerprint = r.str()?;
        let config = ModelConfig::parse(&r.str()?)?;
        if config.fingerprint() != fingerprint {
            return Err(Error::Inconsistent("stored config does not match its fingerprint".into()));
        }
        if let Some(exp) = expected {
            if exp.fingerprint() != fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: exp.fingerprint(),
                    found: fingerprint,
                });
            }
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());

        let (model, mut params) = FitVid::init::<T>(&config, 0)?;
        let count = r.u64()? as usize;
        if count != params.len() {
            return Err(Error::Inconsistent(format!(
                "checkpoint holds {count} parameters, model has {}",
                params.len()
            )));
        }
        for _ in 0..count {
            let name = r.str()?;
            let t = r.tensor::<T>()?;
            let id = params
                .find(&name)
                .ok_or_else(|| Error::Inconsistent(format!("unknown parameter {name}")))?;
            params.set(id, t).map_err(|e| Error::Inconsistent(e.to_string()))?;
        }
        let mut opt = AdamState::new(&params);
        opt.step = r.u64()?;
        for i in 0..count {
            opt.m[i] = r.tensor()?;
            opt.v[i] = r.tensor()?;
        }
        let nbuf = r.u64()? as usize;
        if nbuf != params.buffer_len() {
            return Err(Error::Inconsistent(format!("checkpoint holds {nbuf} buffers")));
        }
        let ids: Vec<_> = params.buffer_ids().collect();
        for id in ids {
            let name = r.str()?;
            if name != params.buffer_name(id) {
                return Err(Error::Inconsistent(format!("unexpected buffer {name}")));
            }
            let n = r.len()?;
            let data: Vec<f64> = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *params.buffer_mut(id) = data;
        }
        if r.pos != bytes.len() {
            return Err(Error::Inconsistent(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((
            model,
            Checkpoint {
                step,
                config,
                params,
                opt,
                rng: RngState { seed, stream, word_pos },
            },
        ))
    }

    /// Writes to a sibling temp file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(FitVid, Self)> {
        Self::from_bytes(&fs::read(path)?, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint<f32> {
        let cfg = ModelConfig {
            stage_filters: vec![2, 4, 8, 16],
            input_size: 16,
            g_dim: 4,
            rnn_size: 4,
            z_dim: 2,
            ..ModelConfig::tiny()
        };
        let (_, params) = FitVid::init::<f32>(&cfg, 5).unwrap();
        let mut opt = AdamState::new(&params);
        opt.step = 7;
        opt.m[0].data_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(3);
        Checkpoint {
            step: 42,
            config: cfg,
            params,
            opt,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..10], b"FITVIDCKPT");
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), CHECKPOINT_VERSION);
        let (_, back) = Checkpoint::<f32>::from_bytes(&bytes, Some(&ck.config)).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.opt, ck.opt);
        assert_eq!(back.rng, ck.rng);
    }

    #[test]
    fn mismatched_fingerprint_is_rejected() {
        let ck = sample();
        let other = ModelConfig {
            beta: 0.5,
            ..ck.config.clone()
        };
        let err = Checkpoint::<f32>::from_bytes(&ck.to_bytes(), Some(&other)).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3], None),
            Err(Error::TruncatedPayload(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad, None), Err(Error::BadMagic(_))));
        let mut newer = bytes;
        newer[12] += 1;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&newer, None),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        rng.next_u64();
        let st = RngState::capture(&rng);
        let a = rng.next_u64();
        assert_eq!(st.restore().next_u64(), a);
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latest.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let (_, back) = Checkpoint::<f32>::load(&path, None).unwrap();
        assert_eq!(back.step, 42);
    }
}
