//! Framed binary checkpoints.
//!
//! ```text
//! magic "AGCM" | version u32 | config hash [8] | param count u32
//! per param:  path len u16 | path | rank u8 | dims u32… | values f64…
//! optimizer:  t u64 | β₁ f64 | β₂ f64 | ε f64 | per param: m f64…, v f64…
//! rng:        seed [32] | stream u64 | word pos u128
//! progress:   epoch u32 | step u64 | best MAE f64
//! ```
//!
//! All integers and floats are little-endian. Parameters appear in path order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::nn::{ParamDecl, ParameterStore};
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainState};

pub const MAGIC: &[u8; 4] = b"AGCM";
pub const VERSION: u32 = 1;

/// First eight bytes of the SHA-256 of the config's JSON form.
pub fn config_hash(config: &NetworkConfig) -> [u8; 8] {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
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
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 8],
    pub params: ParameterStore,
    pub adam: AdamState,
    pub rng: RngState,
    pub epoch: u32,
    pub step: u64,
    pub best_mae: f64,
}

impl Checkpoint {
    pub fn from_state(config: &NetworkConfig, state: &TrainState) -> Self {
        Self {
            config_hash: config_hash(config),
            params: state.store.clone(),
            adam: state.adam.clone(),
            rng: RngState::capture(&state.rng),
            epoch: state.epoch as u32,
            step: state.step as u64,
            best_mae: state.best_mae,
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            rng: self.rng.restore(),
            store: self.params,
            adam: self.adam,
            epoch: self.epoch as usize,
            step: self.step as usize,
            best_mae: self.best_mae,
        }
    }

    /// Check the stored parameters against a model's declarations.
    pub fn check_params(&self, decls: &[ParamDecl]) -> Result<()> {
        if decls.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model declares {}",
                self.params.len(),
                decls.len()
            )));
        }
        for d in decls {
            match self.params.get(&d.path) {
                Some(t) if t.shape() == d.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, model expects {:?}",
                        d.path,
                        t.shape(),
                        d.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("parameter `{}` missing", d.path))),
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, t) in self.params.iter() {
            let len = u16::try_from(path.len())
                .map_err(|_| Error::Checkpoint(format!("path `{path}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_values(&mut out, t.data());
        }
        let a = &self.adam;
        out.extend_from_slice(&a.t.to_le_bytes());
        for x in [a.beta1, a.beta2, a.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for (path, t) in self.params.iter() {
            for moments in [&a.m, &a.v] {
                let m = moments
                    .get(path)
                    .filter(|m| m.shape() == t.shape())
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer moments for `{path}` missing")))?;
                put_values(&mut out, m.data());
            }
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_mae.to_le_bytes());
        Ok(out)
    }

    /// Parse a complete checkpoint. Nothing is returned unless every byte is
    /// accounted for.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let mut config_hash = [0u8; 8];
        config_hash.copy_from_slice(r.take(8)?);
        let count = r.u32()? as usize;
        let mut params = ParameterStore::new();
        let mut order = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let path = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("parameter path is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.filter(|&n| n > 0).ok_or_else(|| r.err("invalid parameter shape"))?;
            let data = r.values(n)?;
            if params.get(&path).is_some() {
                return Err(r.err(format!("duplicate parameter `{path}`")));
            }
            params.insert(path.clone(), Tensor::new(&shape, data)?);
            order.push(path);
        }
        let t = r.u64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        // moments follow the encoder's path order, which is the store's
        let mut sorted = order.clone();
        sorted.sort();
        if sorted != order {
            return Err(r.err("parameters are not in path order"));
        }
        for path in &order {
            let shape = params.get(path).expect("inserted above").shape().to_vec();
            let n = shape.iter().product();
            m.insert(path.clone(), Tensor::new(&shape, r.values(n)?)?);
            v.insert(path.clone(), Tensor::new(&shape, r.values(n)?)?);
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let epoch = r.u32()?;
        let step = r.u64()?;
        let best_mae = r.f64()?;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            params,
            adam: AdamState {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            },
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            epoch,
            step,
            best_mae,
        })
    }
}

fn put_values(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("at byte {}: {msg}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated, needed {n} more bytes"))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.params.is_empty() {
        return Err(Error::Checkpoint("refusing to save an empty parameter store".into()));
    }
    let bytes = ckpt.encode()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint and require it to belong to `config`.
pub fn load_checkpoint(path: &Path, config: &NetworkConfig) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let want = config_hash(config);
    if ckpt.config_hash != want {
        return Err(Error::Checkpoint(format!(
            "{}: config hash {} does not match the current model config ({})",
            path.display(),
            hex(&ckpt.config_hash),
            hex(&want)
        )));
    }
    Ok(ckpt)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
