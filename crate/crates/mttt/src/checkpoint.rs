//! Single-file checkpoints.
//!
//! ```text
//! "MTTTCKPT"  u32 version  u32 record count
//! record: u32 name length, name bytes (UTF-8)
//!         u8 kind (0 f32, 1 f64, 2 u64, 3 UTF-8 text)
//!         u32 rank, rank x u64 extents
//!         u64 payload length, payload (little-endian elements)
//! ```
//!
//! Records are written in a fixed order (metadata, then parameters, then
//! optimizer slots, each in parameter order), so saving a loaded checkpoint
//! reproduces the input byte for byte.

use std::path::Path;

use mttt_core::optim::Optimizer;
use mttt_core::params::ParamSet;
use mttt_core::{DType, Real, Tensor};

use crate::config::Config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MTTTCKPT";
pub const VERSION: u32 = 1;

const KIND_U64: u8 = 2;
const KIND_TEXT: u8 = 3;

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Real = f64> {
    pub config: Config,
    /// Completed epochs.
    pub epoch: u64,
    /// State of the data-order generator for the next epoch.
    pub rng_state: u64,
    pub params: ParamSet<S>,
    pub optimizer: Optimizer<S>,
}

#[derive(Clone, Debug, PartialEq)]
enum Payload<S: Real> {
    Tensor(Tensor<S>),
    U64(u64),
    Text(String),
}

struct Writer {
    out: Vec<u8>,
    count: u32,
}

impl Writer {
    fn record<S: Real>(&mut self, name: &str, payload: &Payload<S>) {
        self.count += 1;
        self.out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.out.extend_from_slice(name.as_bytes());
        let (kind, shape, body): (u8, Vec<usize>, Vec<u8>) = match payload {
            Payload::Tensor(t) => {
                let mut b = Vec::with_capacity(t.numel() * S::DTYPE.size());
                for &v in t.data() {
                    v.write_le(&mut b);
                }
                (S::DTYPE.tag(), t.shape().to_vec(), b)
            }
            Payload::U64(v) => (KIND_U64, Vec::new(), v.to_le_bytes().to_vec()),
            Payload::Text(s) => (KIND_TEXT, vec![s.len()], s.as_bytes().to_vec()),
        };
        self.out.push(kind);
        self.out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for e in shape {
            self.out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        self.out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        self.out.extend_from_slice(&body);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let left = (self.bytes.len() - self.pos) as u64;
        if left < n {
            return Err(Error::Truncated { path: self.path.into(), offset: self.bytes.len() as u64, needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bad(&self, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.into(), message: format!("{} (at byte offset {})", message.into(), self.pos) }
    }

    fn record<S: Real>(&mut self) -> Result<(String, Payload<S>)> {
        let len = self.u32()? as u64;
        let name = std::str::from_utf8(self.take(len)?).map_err(|_| self.bad("record name is not UTF-8"))?.to_string();
        let kind = self.take(1)?[0];
        let rank = self.u32()?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let size = self.u64()?;
        let body = self.take(size)?;
        let payload = match kind {
            KIND_U64 if size == 8 && rank == 0 => Payload::U64(u64::from_le_bytes(body.try_into().unwrap())),
            KIND_TEXT => Payload::Text(
                std::str::from_utf8(body).map_err(|_| self.bad(format!("record `{name}` is not UTF-8")))?.to_string(),
            ),
            k if DType::from_tag(k) == Some(S::DTYPE) => {
                let el = S::DTYPE.size();
                if body.len() != shape.iter().product::<usize>() * el {
                    return Err(self.bad(format!("record `{name}` has {} bytes for shape {shape:?}", body.len())));
                }
                let data = body.chunks_exact(el).map(S::read_le).collect();
                Payload::Tensor(Tensor::new(shape, data)?)
            }
            k => return Err(self.bad(format!("record `{name}` has kind {k}, expected {:?} data", S::DTYPE))),
        };
        Ok((name, payload))
    }
}

impl<S: Real> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { out: Vec::new(), count: 0 };
        w.record::<S>("config", &Payload::Text(self.config.to_text()));
        w.record::<S>("epoch", &Payload::U64(self.epoch));
        w.record::<S>("rng.state", &Payload::U64(self.rng_state));
        w.record::<S>("optim.step", &Payload::U64(self.optimizer.step));
        for p in self.params.iter() {
            w.record(&format!("param/{}", p.name), &Payload::Tensor(p.value.clone()));
        }
        for (p, m) in self.params.names().zip(&self.optimizer.m) {
            w.record(&format!("optim.m/{p}"), &Payload::Tensor(m.clone()));
        }
        for (p, v) in self.params.names().zip(&self.optimizer.v) {
            w.record(&format!("optim.v/{p}"), &Payload::Tensor(v.clone()));
        }
        let mut out = Vec::with_capacity(w.out.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&w.count.to_le_bytes());
        out.extend_from_slice(&w.out);
        out
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            records.push(r.record::<S>()?);
        }
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes"));
        }

        let mut it = records.into_iter().peekable();
        let mut next = |want: &str| -> Result<Payload<S>> {
            match it.next() {
                Some((name, p)) if name == want => Ok(p),
                Some((name, _)) => Err(Error::Format { path: path.into(), message: format!("expected record `{want}`, found `{name}`") }),
                None => Err(Error::Format { path: path.into(), message: format!("missing record `{want}`") }),
            }
        };
        let text = |p: Payload<S>| match p {
            Payload::Text(s) => Ok(s),
            _ => Err(Error::Format { path: path.into(), message: "config record is not text".into() }),
        };
        let int = |p: Payload<S>| match p {
            Payload::U64(v) => Ok(v),
            _ => Err(Error::Format { path: path.into(), message: "counter record is not u64".into() }),
        };
        let tensor = |p: Payload<S>| match p {
            Payload::Tensor(t) => Ok(t),
            _ => Err(Error::Format { path: path.into(), message: "parameter record is not a tensor".into() }),
        };

        let config = Config::parse(&text(next("config")?)?)?;
        let epoch = int(next("epoch")?)?;
        let rng_state = int(next("rng.state")?)?;
        let step = int(next("optim.step")?)?;

        let model = config.build_model::<S>()?;
        let mut params = model.params;
        let names: Vec<String> = params.names().map(String::from).collect();
        let mut values = Vec::with_capacity(names.len());
        for (name, current) in names.iter().zip(params.tensors()) {
            let t = tensor(next(&format!("param/{name}"))?)?;
            if t.shape() != current.shape() {
                return Err(Error::Format {
                    path: path.into(),
                    message: format!("parameter `{name}` has shape {:?}, config expects {:?}", t.shape(), current.shape()),
                });
            }
            values.push(t);
        }
        params.set_tensors(values);
        let mut optimizer = Optimizer::new(config.train.optimizer, config.train.weight_decay, &params);
        optimizer.step = step;
        for (i, name) in names.iter().enumerate() {
            optimizer.m[i] = tensor(next(&format!("optim.m/{name}"))?)?;
        }
        for i in 0..optimizer.v.len() {
            optimizer.v[i] = tensor(next(&format!("optim.v/{}", names[i]))?)?;
        }
        if let Some((name, _)) = it.next() {
            return Err(Error::Format { path: path.into(), message: format!("unexpected record `{name}`") });
        }
        Ok(Checkpoint { config, epoch, rng_state, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Element type a checkpoint file was written with.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.bad("not a checkpoint (bad magic)"));
    }
    r.u32()?;
    let count = r.u32()?;
    for _ in 0..count {
        let len = r.u32()? as u64;
        r.take(len)?;
        let kind = r.take(1)?[0];
        let rank = r.u32()?;
        for _ in 0..rank {
            r.u64()?;
        }
        let size = r.u64()?;
        r.take(size)?;
        if let Some(d) = DType::from_tag(kind) {
            return Ok(d);
        }
    }
    Err(r.bad("checkpoint holds no tensors"))
}
