use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::{Graph, ParamId, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

/// Trainable array with its AdamW moment slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    offset: u64,
}

/// Binary payload paired with a checkpoint manifest.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds one parameter into `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, id: ParamId) -> Var {
        graph.param(id, self.params[id.0].value.clone())
    }

    /// Binds every parameter; the returned vector is indexed by `ParamId::index`.
    pub fn bind_all(&self, graph: &mut Graph<T>) -> Vec<Var> {
        (0..self.params.len()).map(|i| self.bind(graph, ParamId(i))).collect()
    }

    pub fn reset_moments(&mut self) {
        for p in &mut self.params {
            p.first_moment = Tensor::zeros(p.value.shape());
            p.second_moment = Tensor::zeros(p.value.shape());
        }
    }

    /// Writes the manifest at `manifest` and raw little-endian f64 values next to it.
    pub fn save(&self, manifest: impl AsRef<Path>) -> Result<()> {
        let manifest = manifest.as_ref();
        let mut entries = BTreeMap::new();
        let mut payload = Vec::with_capacity(self.num_values() * 8);
        for p in &self.params {
            entries.insert(
                p.name.clone(),
                ManifestEntry {
                    shape: p.value.shape().to_vec(),
                    offset: payload.len() as u64,
                },
            );
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        std::fs::write(manifest, serde_json::to_string_pretty(&entries)?)?;
        std::fs::File::create(payload_path(manifest))?.write_all(&payload)?;
        Ok(())
    }

    /// Replaces every parameter value with the one stored under the same name.
    /// Names and shapes must match exactly; moments are reset.
    pub fn load_values(&mut self, manifest: impl AsRef<Path>) -> Result<()> {
        let manifest = manifest.as_ref();
        let entries: BTreeMap<String, ManifestEntry> =
            serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
        let mut payload = Vec::new();
        std::fs::File::open(payload_path(manifest))?.read_to_end(&mut payload)?;
        if entries.len() != self.params.len() {
            return Err(shape_err(
                "checkpoint",
                format!("{} stored parameters, model has {}", entries.len(), self.params.len()),
            ));
        }
        for p in &mut self.params {
            let e = entries
                .get(&p.name)
                .ok_or_else(|| Error::Missing(format!("checkpoint lacks parameter {}", p.name)))?;
            if e.shape != p.value.shape() {
                return Err(shape_err(
                    "checkpoint",
                    format!("{}: stored {:?}, expected {:?}", p.name, e.shape, p.value.shape()),
                ));
            }
            let start = e.offset as usize;
            let end = start + p.value.len() * 8;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| shape_err("checkpoint", format!("{} runs past payload", p.name)))?;
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                *dst = T::lit(v);
            }
        }
        self.reset_moments();
        Ok(())
    }
}
