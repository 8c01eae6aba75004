//! Binary tensor container shared by checkpoints and mel feature files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MELGANCK"
//! version    u32
//! meta_len   u64, then meta_len bytes of UTF-8 `key=value` lines
//! n_records  u64
//! record:    name_len u32, name bytes, dtype u8 (0 = f32, 1 = f64),
//!            rank u8, rank x u64 dims, raw little-endian values
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dsp::{MelConfig, MelSpectrogram, StftConfig};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"MELGANCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic header")]
    BadMagic,
    #[error("unsupported container version {0} (this build reads {VERSION})")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("record {name}: {detail}")]
    BadRecord { name: String, detail: String },
    #[error("metadata: {0}")]
    Meta(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    fn shape(&self) -> [usize; 4] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    /// Ordered `key=value` metadata.
    pub meta: Vec<(String, String)>,
    pub records: Vec<(String, TensorData)>,
}

impl Container {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V, ContainerError>
    where
        V::Err: std::fmt::Display,
    {
        let raw = self
            .meta(key)
            .ok_or_else(|| ContainerError::Meta(format!("missing key '{key}'")))?;
        raw.parse()
            .map_err(|e| ContainerError::Meta(format!("{key}={raw}: {e}")))
    }

    pub fn push<T: Element>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let data = match T::DTYPE {
            0 => TensorData::F32(t.cast()),
            _ => TensorData::F64(t.cast()),
        };
        self.records.push((name.into(), data));
    }

    pub fn get_f32(&self, name: &str) -> Result<&Tensor<f32>, ContainerError> {
        match self.find(name)? {
            TensorData::F32(t) => Ok(t),
            TensorData::F64(_) => Err(ContainerError::BadRecord {
                name: name.into(),
                detail: "expected f32, found f64".into(),
            }),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<&Tensor<f64>, ContainerError> {
        match self.find(name)? {
            TensorData::F64(t) => Ok(t),
            TensorData::F32(_) => Err(ContainerError::BadRecord {
                name: name.into(),
                detail: "expected f64, found f32".into(),
            }),
        }
    }

    fn find(&self, name: &str) -> Result<&TensorData, ContainerError> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| ContainerError::BadRecord {
                name: name.into(),
                detail: "missing".into(),
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (name, data) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = data.shape();
            match data {
                TensorData::F32(_) => out.push(0),
                TensorData::F64(_) => out.push(1),
            }
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match data {
                TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic").map_err(|_| ContainerError::BadMagic)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|e| ContainerError::Meta(e.to_string()))?;
        let mut meta = Vec::new();
        for line in meta_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ContainerError::Meta(format!("malformed line '{line}'")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let n = r.u64("record count")?;
        let mut records = Vec::new();
        for _ in 0..n {
            let name_len = r.u32("record name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "record name")?.to_vec())
                .map_err(|e| ContainerError::Meta(e.to_string()))?;
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            if rank != 4 {
                return Err(ContainerError::BadRecord {
                    name,
                    detail: format!("rank {rank}, expected 4"),
                });
            }
            let mut shape = [0usize; 4];
            for d in shape.iter_mut() {
                *d = r.u64("dims")? as usize;
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(ContainerError::Truncated("tensor values"))?;
            let data = match dtype {
                0 => {
                    let raw = r.take(numel.checked_mul(4).ok_or(ContainerError::Truncated("tensor values"))?, "tensor values")?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F32(Tensor::from_vec(shape, v).expect("length checked"))
                }
                1 => {
                    let raw = r.take(numel.checked_mul(8).ok_or(ContainerError::Truncated("tensor values"))?, "tensor values")?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F64(Tensor::from_vec(shape, v).expect("length checked"))
                }
                other => return Err(ContainerError::BadDtype(other)),
            };
            records.push((name, data));
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(ContainerError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Store a mel spectrogram as a feature file (one f64 record named `mel`).
pub fn mel_to_container(mel: &MelSpectrogram) -> Container {
    let mut c = Container::default();
    c.set_meta("kind", "mel");
    c.set_meta("source_id", &mel.source_id);
    c.set_meta("win_length", mel.stft.win_length);
    c.set_meta("hop_length", mel.stft.hop_length);
    c.set_meta("n_fft", mel.stft.n_fft);
    c.set_meta("center", mel.stft.center);
    c.set_meta("n_mels", mel.mel.n_mels);
    c.set_meta("f_min", mel.mel.f_min);
    c.set_meta("f_max", mel.mel.f_max);
    c.set_meta("sample_rate", mel.mel.sample_rate);
    c.set_meta("floor_db", mel.mel.floor_db);
    let t = Tensor::from_vec([1, 1, mel.n_mels(), mel.n_frames()], mel.values().to_vec()).expect("mel shape");
    c.push("mel", t);
    c
}

pub fn mel_from_container(c: &Container) -> Result<MelSpectrogram, ContainerError> {
    if c.meta("kind") != Some("mel") {
        return Err(ContainerError::Meta("not a mel feature file".into()));
    }
    let stft = StftConfig {
        win_length: c.meta_parse("win_length")?,
        hop_length: c.meta_parse("hop_length")?,
        n_fft: c.meta_parse("n_fft")?,
        center: c.meta_parse("center")?,
    };
    let mel = MelConfig {
        n_mels: c.meta_parse("n_mels")?,
        f_min: c.meta_parse("f_min")?,
        f_max: c.meta_parse("f_max")?,
        sample_rate: c.meta_parse("sample_rate")?,
        floor_db: c.meta_parse("floor_db")?,
    };
    let t = c.get_f64("mel")?;
    let [_, _, h, w] = t.shape();
    MelSpectrogram::new(t.data().to_vec(), h, w, stft, mel, c.meta("source_id").unwrap_or(""))
        .map_err(|e| ContainerError::BadRecord {
            name: "mel".into(),
            detail: e.to_string(),
        })
}
