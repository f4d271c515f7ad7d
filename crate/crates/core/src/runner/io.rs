//! Binary formats: checkpoints (`SGCK`) and visual feature files (`SVTF`).
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{AdamWConfig, OptimizerState, ParamSet, Tensor};
use crate::{Error, Result};

use super::config::RunConfig;

const CKPT_MAGIC: &[u8; 4] = b"SGCK";
const CKPT_VERSION: u32 = 1;
const SVTF_MAGIC: &[u8; 4] = b"SVTF";
const SVTF_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|e| Error::Format(e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(CKPT_MAGIC);
        out.extend(CKPT_VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.config)?);
        out.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.push(u8::from(t.requires_grad()));
            out.extend((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let c = opt.config;
                put_f64s(&mut out, &[c.lr, c.beta1, c.beta2, c.eps, c.weight_decay]);
                out.extend(opt.step.to_le_bytes());
                let names: Vec<&String> = opt.names().collect();
                out.extend((names.len() as u32).to_le_bytes());
                for name in names {
                    let (m, v) = opt.moments(name).expect("listed name");
                    put_str(&mut out, name);
                    out.extend((m.len() as u32).to_le_bytes());
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { inner: bytes };
        if r.bytes(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config: RunConfig = serde_json::from_str(&r.string()?)?;
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let trainable = r.u8()? != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            let t = Tensor::new(&shape, data)?;
            if trainable {
                params.insert(name, t)?;
            } else {
                params.insert_frozen(name, t)?;
            }
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let c = r.f64s(5)?;
                let mut opt = OptimizerState::new(AdamWConfig {
                    lr: c[0],
                    beta1: c[1],
                    beta2: c[2],
                    eps: c[3],
                    weight_decay: c[4],
                });
                opt.step = r.u64()?;
                for _ in 0..r.u32()? {
                    let name = r.string()?;
                    let n = r.u32()? as usize;
                    let m = r.f64s(n)?;
                    let v = r.f64s(n)?;
                    opt.set_moments(name, m, v);
                }
                Some(opt)
            }
            b => return Err(Error::Format(format!("bad optimizer flag {b}"))),
        };
        if !r.inner.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.inner.len())));
        }
        Ok(Self {
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Encodes `[T, N, D]` features as an SVTF file body (values rounded to f32).
pub fn svtf_to_bytes(features: &Tensor) -> Result<Vec<u8>> {
    if features.ndim() != 3 {
        return Err(Error::Dimension(format!("SVTF needs [T, N, D], got {:?}", features.shape())));
    }
    let mut out = Vec::with_capacity(20 + 4 * features.numel());
    out.extend(SVTF_MAGIC);
    out.extend(SVTF_VERSION.to_le_bytes());
    for &d in features.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format("extent does not fit u32".into()))?;
        out.extend(d.to_le_bytes());
    }
    for &v in features.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::numeric("svtf_to_bytes"));
        }
        out.extend(f.to_le_bytes());
    }
    Ok(out)
}

pub fn svtf_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { inner: bytes };
    if r.bytes(4)? != SVTF_MAGIC {
        return Err(Error::Format("not an SVTF file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != SVTF_VERSION {
        return Err(Error::Format(format!("unsupported SVTF version {version}")));
    }
    let (t, n, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let count = t * n * d;
    if r.inner.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            r.inner.len(),
            4 * count
        )));
    }
    let data: Vec<f64> = r
        .inner
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite value in SVTF payload".into()));
    }
    Tensor::new(&[t, n, d], data)
}

pub fn write_svtf(path: &Path, features: &Tensor) -> Result<()> {
    std::fs::write(path, svtf_to_bytes(features)?)?;
    Ok(())
}

pub fn read_svtf(path: &Path) -> Result<Tensor> {
    svtf_from_bytes(&std::fs::read(path)?)
}
