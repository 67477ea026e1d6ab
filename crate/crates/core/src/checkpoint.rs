//! Checkpoint container: configuration, vocabulary, parameters, and running statistics
//! behind a SHA-256 trailer. The byte layout is documented in `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::language::Vocabulary;
use crate::models::{build_variant, Built};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CBNCKPT\0";
pub const CHECKPOINT_VERSION: u64 = 1;
/// Endianness byte for little-endian payloads.
pub const LITTLE_ENDIAN: u8 = 1;
const DIGEST_BYTES: usize = 32;

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ExperimentConfig,
    pub vocab: Option<Vocabulary>,
    pub store: ParamStore<T>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u64(t.rank() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Load(format!("payload ends early at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| Error::Load(format!("length {n} is implausible")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Load("text field is not UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Load("tensor too large".into()))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Load("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("eight bytes")))).collect();
        Tensor::new(&shape, data)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&CHECKPOINT_MAGIC);
        w.u64(CHECKPOINT_VERSION);
        w.0.push(LITTLE_ENDIAN);
        w.bytes(self.config.to_text().as_bytes());
        match &self.vocab {
            Some(v) => {
                w.0.push(1);
                w.bytes(v.to_text().as_bytes());
            }
            None => w.0.push(0),
        }
        w.u64(self.store.len() as u64);
        for p in self.store.iter() {
            w.bytes(p.name.as_bytes());
            w.0.push(p.frozen as u8);
            w.tensor(&p.tensor);
        }
        let buffers: Vec<_> = self.store.buffers().collect();
        w.u64(buffers.len() as u64);
        for (name, t) in buffers {
            w.bytes(name.as_bytes());
            w.tensor(t);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    /// Parse a checkpoint. The checksum is verified before any field is interpreted,
    /// so a damaged file never yields a partial model.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::Load("not a checkpoint".into()));
        }
        if bytes.len() < CHECKPOINT_MAGIC.len() + DIGEST_BYTES {
            return Err(Error::Checksum { stored: String::new(), computed: String::new() });
        }
        let (payload, stored) = bytes.split_at(bytes.len() - DIGEST_BYTES);
        let computed = Sha256::digest(payload);
        if computed.as_slice() != stored {
            return Err(Error::Checksum { stored: hex(stored), computed: hex(&computed) });
        }
        let mut r = Reader { bytes: payload, at: CHECKPOINT_MAGIC.len() };
        let version = r.u64()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let endian = r.u8()?;
        if endian != LITTLE_ENDIAN {
            return Err(Error::Load(format!("unsupported endianness byte {endian}")));
        }
        let config = ExperimentConfig::parse(&r.string()?)?;
        let vocab = match r.u8()? {
            0 => None,
            1 => Some(Vocabulary::from_text(&r.string()?)?),
            b => return Err(Error::Load(format!("bad vocabulary flag {b}"))),
        };
        let mut store = ParamStore::new();
        for _ in 0..r.len()? {
            let name = r.string()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Load(format!("bad frozen flag {b} for `{name}`"))),
            };
            let id = store.add(name, r.tensor()?).map_err(|e| Error::Load(e.to_string()))?;
            store.get_mut(id).frozen = frozen;
        }
        for _ in 0..r.len()? {
            let name = r.string()?;
            store.add_buffer(name, r.tensor()?).map_err(|e| Error::Load(e.to_string()))?;
        }
        if r.at != payload.len() {
            return Err(Error::Load(format!("{} trailing bytes", payload.len() - r.at)));
        }
        Ok(Self { config, vocab, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the model structure from the stored configuration and install every
    /// stored tensor. Names, shapes, and frozen flags must match exactly.
    pub fn restore(&self) -> Result<Built<T>> {
        let vocab_size = self.vocab.as_ref().map_or(crate::language::RESERVED, Vocabulary::len);
        let mut built = build_variant::<T>(&self.config, vocab_size, None)?;
        let expected = built.store.len() + built.store.buffers().count();
        let stored = self.store.len() + self.store.buffers().count();
        if built.store.load_matching(&self.store) != expected || stored != expected {
            return Err(Error::Load("checkpoint tensors do not match the configured model".into()));
        }
        for p in self.store.iter() {
            let id = built.store.id(&p.name).expect("matched above");
            built.store.get_mut(id).frozen = p.frozen;
        }
        Ok(built)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
