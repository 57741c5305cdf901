//! Network checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "KDGANCKP"
//! version    u32      1
//! spec_len   u32      byte length of the spec text
//! spec       spec_len bytes of UTF-8 TOML describing the model
//! count      u32      number of tensors
//! count x {
//!     name_len u32, name (UTF-8)
//!     ndim     u32, dims (u32 each)
//!     values   f32 x product(dims), row-major
//! }
//! ```
//!
//! Tensors are parameters followed by buffers (batch-norm running
//! statistics), each in the network's visiting order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::architectures::{Discriminator, DiscriminatorSpec, NetworkSpec, StubModel, Wrn};
use crate::error::{Error, Result};
use crate::layers::{Module, Rng};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 8] = b"KDGANCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Wrn(NetworkSpec),
    Discriminator(DiscriminatorSpec),
    Stub(StubModel),
}

impl ModelSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Wrn(s) => s.num_classes,
            ModelSpec::Discriminator(s) => s.num_classes,
            ModelSpec::Stub(s) => s.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// A model rebuilt from a checkpoint.
#[derive(Clone, Debug)]
pub enum Model {
    Wrn(Wrn<f32>),
    Discriminator(Discriminator<f32>),
    Stub(StubModel),
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Wrn(n) => ModelSpec::Wrn(n.spec),
            Model::Discriminator(d) => ModelSpec::Discriminator(d.spec),
            Model::Stub(s) => ModelSpec::Stub(*s),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            Model::Wrn(n) => Checkpoint::from_module(self.spec(), n),
            Model::Discriminator(d) => Checkpoint::from_module(self.spec(), d),
            Model::Stub(_) => Checkpoint {
                spec: self.spec(),
                tensors: Vec::new(),
            },
        }
    }
}

impl Checkpoint {
    pub fn from_module<F: Element>(spec: ModelSpec, m: &impl Module<F>) -> Self {
        let mut tensors = Vec::new();
        m.visit_params(&mut |p| tensors.push((p.name().to_string(), p.value.cast())));
        m.visit_buffers(&mut |name, t| tensors.push((name.to_string(), t.cast())));
        Self { spec, tensors }
    }

    /// Copies stored values into `m`; every parameter and buffer must be
    /// present with a matching shape, and nothing may be left over.
    pub fn apply_to<F: Element>(&self, m: &mut impl Module<F>) -> Result<()> {
        let mut by_name: std::collections::HashMap<&str, &Tensor<f32>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err: Option<Error> = None;
        let mut take = |name: &str, dst: &mut Tensor<F>| {
            if err.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => err = Some(Error::Format(format!("checkpoint lacks tensor {name}"))),
                Some(src) if src.shape() != dst.shape() => {
                    err = Some(Error::ShapeMismatch {
                        op: "checkpoint load",
                        lhs: dst.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    })
                }
                Some(src) => *dst = src.cast(),
            }
        };
        m.visit_params_mut(&mut |p| {
            let name = p.name().to_string();
            take(&name, &mut p.value)
        });
        m.visit_buffers_mut(&mut |name, t| take(name, t));
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("checkpoint has unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = toml::to_string(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let spec_len = r.u32()? as usize;
        let spec_text = std::str::from_utf8(r.take(spec_len)?)
            .map_err(|e| Error::Format(format!("spec is not UTF-8: {e}")))?;
        let spec: ModelSpec = toml::from_str(spec_text).map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { spec, tensors })
    }

    /// Rebuilds the model the checkpoint describes.
    pub fn into_model(&self) -> Result<Model> {
        // Initial values are overwritten, so the seed is irrelevant.
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(match &self.spec {
            ModelSpec::Wrn(s) => {
                let mut n = Wrn::new(*s, &mut rng)?;
                self.apply_to(&mut n)?;
                Model::Wrn(n)
            }
            ModelSpec::Discriminator(s) => {
                let mut d = Discriminator::new(*s, &mut rng)?;
                self.apply_to(&mut d)?;
                Model::Discriminator(d)
            }
            ModelSpec::Stub(s) => Model::Stub(*s),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                offset: self.pos,
                reason: format!("need {n} more bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(path)?.into_model()
}
