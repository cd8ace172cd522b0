//! Binary checkpoints for models, steering vectors and score stores.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STSC"            4 bytes magic
//! version           u32 (currently 1)
//! kind              u8  (0 model, 1 vector, 2 iestore)
//! meta_len          u32, then meta_len bytes of UTF-8 JSON
//! n_tensors         u32
//! per tensor:       name_len u16, name bytes, ndim u8, ndim × u32 extents
//! payload           every tensor's f64 values in table order
//! crc32             u32 over all preceding bytes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::IEStore;
use crate::error::{Error, Result};
use crate::model::{EdgeId, Model, ModelConfig, NodeId};
use crate::steering::{Method, SteeringVector};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STSC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Model = 0,
    Vector = 1,
    IEStore = 2,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Kind::Model),
            1 => Ok(Kind::Vector),
            2 => Ok(Kind::IEStore),
            _ => Err(Error::Checkpoint(format!("unknown kind tag {b}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        let meta = self.meta.as_bytes();
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(too_big)?.to_le_bytes());
        out.extend_from_slice(meta);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(too_big)?.to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&u16::try_from(nb.len()).map_err(too_big)?.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(u8::try_from(t.shape().len()).map_err(too_big)?);
            for &e in t.shape() {
                out.extend_from_slice(&u32::try_from(e).map_err(too_big)?.to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 + 4 + 1 + 4 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} not supported (expected {VERSION})"
            )));
        }
        let kind = Kind::from_byte(r.u8()?)?;
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.at != body.len() {
            return Err(Error::Checkpoint("trailing bytes before CRC".into()));
        }
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    fn expect(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' missing")))
    }
}

fn too_big<E>(_: E) -> Error {
    Error::Checkpoint("field exceeds its width in the format".into())
}

fn meta_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Serde(e.to_string()))
}

fn parse_meta<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
}

pub fn model_checkpoint(model: &Model) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: Kind::Model,
        meta: meta_json(&model.config)?,
        tensors: model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    })
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    ck.expect(Kind::Model)?;
    let config: ModelConfig = parse_meta(&ck.meta)?;
    Model::from_tensors(&config, ck.tensors.iter().map(|(_, t)| t.clone()).collect())
}

#[derive(Serialize, Deserialize)]
struct VectorMeta {
    layer: usize,
    position: Option<isize>,
    alpha: f64,
    method: Method,
}

pub fn vector_checkpoint(v: &SteeringVector) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: Kind::Vector,
        meta: meta_json(&VectorMeta {
            layer: v.layer,
            position: v.position,
            alpha: v.alpha,
            method: v.method,
        })?,
        tensors: vec![("values".into(), v.values.clone())],
    })
}

pub fn vector_from_checkpoint(ck: &Checkpoint) -> Result<SteeringVector> {
    ck.expect(Kind::Vector)?;
    let m: VectorMeta = parse_meta(&ck.meta)?;
    Ok(SteeringVector {
        values: ck.tensor("values")?.clone(),
        layer: m.layer,
        position: m.position,
        alpha: m.alpha,
        method: m.method,
    })
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    steer_layer: usize,
    edges: Vec<String>,
    nodes: Vec<String>,
    positions_evaluated: usize,
    samples: usize,
    skipped: usize,
}

pub fn iestore_checkpoint(s: &IEStore) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: Kind::IEStore,
        meta: meta_json(&StoreMeta {
            steer_layer: s.steer_layer,
            edges: s.edges.keys().map(ToString::to_string).collect(),
            nodes: s.nodes.keys().map(ToString::to_string).collect(),
            positions_evaluated: s.positions_evaluated,
            samples: s.samples,
            skipped: s.skipped,
        })?,
        tensors: vec![
            ("edges".into(), Tensor::vector(s.edges.values().copied().collect())),
            ("nodes".into(), Tensor::vector(s.nodes.values().copied().collect())),
            ("dims".into(), Tensor::vector(s.dims.clone())),
        ],
    })
}

pub fn iestore_from_checkpoint(ck: &Checkpoint) -> Result<IEStore> {
    ck.expect(Kind::IEStore)?;
    let m: StoreMeta = parse_meta(&ck.meta)?;
    let ev = ck.tensor("edges")?;
    let nv = ck.tensor("nodes")?;
    if ev.len() != m.edges.len() || nv.len() != m.nodes.len() {
        return Err(Error::Checkpoint("score table length mismatch".into()));
    }
    let edges = m
        .edges
        .iter()
        .zip(ev.data())
        .map(|(k, v)| Ok((k.parse::<EdgeId>()?, *v)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let nodes = m
        .nodes
        .iter()
        .zip(nv.data())
        .map(|(k, v)| Ok((k.parse::<NodeId>()?, *v)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(IEStore {
        steer_layer: m.steer_layer,
        edges,
        nodes,
        dims: ck.tensor("dims")?.data().to_vec(),
        positions_evaluated: m.positions_evaluated,
        samples: m.samples,
        skipped: m.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: Kind::Vector,
            meta: "{\"x\":1}".into(),
            tensors: vec![
                ("a".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap()),
                ("b".into(), Tensor::vector(vec![f64::MIN_POSITIVE])),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"STSC");
    }

    #[test]
    fn corruption_and_version_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));

        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        assert!(Checkpoint::from_bytes(b"STS").is_err());
    }
}
