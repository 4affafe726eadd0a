use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Grads, Graph, Tensor, Var};
use crate::error::{Error, Result};

const CK01_MAGIC: &[u8; 4] = b"CK01";

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters of one network, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Parameter>,
}

/// Per-graph mapping from parameter slot to tape variable.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter and returns its slot index.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let (slot, _) = self.params.insert_full(name, Parameter { value, trainable: true });
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn slot(&self, slot: usize) -> &Parameter {
        &self.params[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.values_mut().for_each(|p| p.trainable = trainable);
    }

    /// Places every parameter on `g`. Frozen parameters become constants.
    pub fn bind(&self, g: &Graph) -> Binding {
        let vars = self
            .params
            .values()
            .map(|p| if p.trainable { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect();
        Binding { vars }
    }

    /// Gradients in slot order; parameters without one get zeros.
    pub fn gradients(&self, binding: &Binding, grads: &mut Grads) -> Vec<Tensor> {
        self.params
            .values()
            .zip(&binding.vars)
            .map(|(p, v)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CkEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkHeader {
    params: Vec<CkEntry>,
}

/// Writes `CK01`: magic, u32 LE header length, JSON header, then every
/// parameter's `f64` payload in header order.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let header = CkHeader {
        params: store
            .iter()
            .map(|(name, p)| CkEntry { name: name.to_string(), shape: p.value.shape().to_vec(), dtype: "f64".into() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|source| Error::Open { path: path.to_path_buf(), source })?;
    let mut out = BufWriter::new(file);
    out.write_all(CK01_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|source| Error::Open { path: path.to_path_buf(), source })?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Truncated("checkpoint shorter than its preamble".into()));
    }
    if &bytes[..4] != CK01_MAGIC {
        return Err(Error::BadMagic { expected: "CK01", found: bytes[..4].to_vec() });
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    let header: CkHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Header(e.to_string()))?;
    let mut payload = &body[hlen..];
    let expected: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
    if payload.len() != expected {
        return Err(Error::PayloadMismatch { expected, actual: payload.len() });
    }
    let mut store = ParamStore::new();
    for e in header.params {
        if e.dtype != "f64" {
            return Err(Error::Header(format!("unsupported dtype {:?}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let (chunk, rest) = payload.split_at(n * 8);
        payload = rest;
        let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.register(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok(store)
}
