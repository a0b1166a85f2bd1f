//! `DPCK` checkpoint container and short content digests.
//!
//! ```text
//! "DPCK" | version u16 | config digest [8] | config_len u32 | config JSON
//! | param_count u32 | per param: name_len u16, name, rows u32, cols u32, f32 data
//! | has_optimizer u8 | [step u64, lr, wd, beta1, beta2, eps, clip as f64,
//!                       per param: m f32 data, v f32 data]
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::kernels::optim::{AdamWConfig, OptimizerState};
use crate::kernels::params::ParamStore;
use crate::kernels::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub type Digest = [u8; 8];

/// First 8 bytes of SHA-256.
pub fn digest(bytes: &[u8]) -> Digest {
    let full = Sha256::digest(bytes);
    let mut out = [0; 8];
    out.copy_from_slice(&full[..8]);
    out
}

pub fn digest_hex(d: &Digest) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a config together with parameter values.
pub fn params_digest(config_json: &str, params: &ParamStore<f32>) -> Digest {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    for (_, name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    let mut out = [0; 8];
    out.copy_from_slice(&h.finalize()[..8]);
    out
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn config_digest(&self) -> Digest {
        digest(self.config_json.as_bytes())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_digest());
        put_u32(&mut b, self.config_json.len())?;
        b.extend_from_slice(self.config_json.as_bytes());
        put_u32(&mut b, self.params.len())?;
        for (_, name, t) in self.params.iter() {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Data(format!("parameter name too long: {name}")))?;
            b.extend_from_slice(&len.to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            put_u32(&mut b, t.rows())?;
            put_u32(&mut b, t.cols())?;
            put_f32s(&mut b, t.data());
        }
        match &self.optimizer {
            None => b.push(0),
            Some(opt) => {
                if opt.m.len() != self.params.len() {
                    return Err(Error::Shape(
                        "optimizer state does not match parameters".into(),
                    ));
                }
                b.push(1);
                b.extend_from_slice(&opt.step.to_le_bytes());
                let c = &opt.config;
                for v in [c.lr, c.weight_decay, c.beta1, c.beta2, c.eps, c.clip_norm] {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_f32s(&mut b, m.data());
                    put_f32s(&mut b, v.data());
                }
            }
        }
        Ok(b)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic mismatch".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let stored: Digest = r.take(8)?.try_into().expect("8 bytes");
        let len = r.u32()? as usize;
        let config_json = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?
            .to_owned();
        let found = digest(config_json.as_bytes());
        if found != stored {
            return Err(Error::DigestMismatch {
                expected: digest_hex(&stored),
                found: digest_hex(&found),
            });
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_owned();
            if params.id(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f32s(rows * cols)?;
            params.add(name, Tensor::from_vec(rows, cols, data)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut f = [0.0; 6];
                for v in &mut f {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
                let config = AdamWConfig {
                    lr: f[0],
                    weight_decay: f[1],
                    beta1: f[2],
                    beta2: f[3],
                    eps: f[4],
                    clip_norm: f[5],
                };
                let mut state = OptimizerState::new(config, &params);
                state.step = step;
                for i in 0..params.len() {
                    let n = state.m[i].len();
                    state.m[i].data_mut().copy_from_slice(&r.f32s(n)?);
                    state.v[i].data_mut().copy_from_slice(&r.f32s(n)?);
                }
                Some(state)
            }
            flag => return Err(Error::Format(format!("bad optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_json,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_u32(b: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
    b.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(b: &mut Vec<u8>, data: &[f32]) {
    b.reserve(4 * data.len());
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
