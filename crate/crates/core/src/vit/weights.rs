//! Named parameter storage and the VTW weight file.
//!
//! VTW layout:
//!
//! ```text
//! "VITWGT01"                       8 bytes
//! manifest length                  u32 little-endian
//! manifest                         UTF-8 JSON array of {name, dtype, shape, offset}
//! zero padding                     up to the next multiple of 64 bytes
//! data region                      little-endian f32, row-major
//! ```
//!
//! `offset` is measured in bytes from the start of the data region and is a
//! multiple of 64; the data region itself starts 64-byte aligned in the file,
//! so every tensor is 64-byte aligned absolutely as well.

use std::collections::BTreeMap;
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"VITWGT01";
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default)]
pub struct WeightStore<F: Element = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Element> WeightStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Option<Tensor<F>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Element>(&self) -> WeightStore<G> {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks every tensor `config` needs is present with its exact shape.
    /// Returns the names of tensors the config does not use.
    pub fn validate(&self, config: &ViTConfig) -> Result<Vec<String>> {
        config.validate()?;
        let expected = config.expected_shapes();
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let known: std::collections::HashSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        Ok(self
            .tensors
            .keys()
            .filter(|k| !known.contains(k.as_str()))
            .cloned()
            .collect())
    }

    /// Gaussian-initialised store for `config`: weights and biases drawn from
    /// N(0, std), layer-norm scales from 1 + N(0, std).
    pub fn random(config: &ViTConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("bad std {std}: {e}")))?;
        let mut store = Self::new();
        for (name, shape) in config.expected_shapes() {
            let is_norm_scale = name.ends_with("norm1.weight")
                || name.ends_with("norm2.weight")
                || name == "norm.weight";
            let offset = if is_norm_scale { 1.0 } else { 0.0 };
            let t = Tensor::from_fn(shape, |_| F::from_f64(offset + normal.sample(&mut rng)));
            store.insert(name, t);
        }
        Ok(store)
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serialises a store to VTW bytes, tensors in name order.
pub fn to_vtw_bytes(store: &WeightStore<f32>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, t) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset = align_up(offset + t.numel() * 4);
    }
    let manifest = serde_json::to_vec(&entries).map_err(|e| Error::Manifest(e.to_string()))?;
    let manifest_len = u32::try_from(manifest.len())
        .map_err(|_| Error::Manifest("manifest exceeds 4 GiB".into()))?;
    let data_start = align_up(MAGIC.len() + 4 + manifest.len());
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&manifest);
    out.resize(data_start, 0);
    for (entry, (_, t)) in entries.iter().zip(store.iter()) {
        out.resize(data_start + entry.offset, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(data_start + offset, 0);
    Ok(out)
}

pub fn write_vtw(path: impl AsRef<Path>, store: &WeightStore<f32>) -> Result<()> {
    std::fs::write(path, to_vtw_bytes(store)?)?;
    Ok(())
}

/// Parses VTW bytes without checking them against any config.
/// Returns the manifest in file order alongside the tensors.
pub fn parse_vtw(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, WeightStore<f32>)> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != MAGIC {
        let expected = String::from_utf8_lossy(MAGIC).into_owned();
        let found = String::from_utf8_lossy(head).into_owned();
        if head.len() == MAGIC.len() && head[..6] == MAGIC[..6] {
            return Err(Error::UnsupportedVersion { expected, found });
        }
        return Err(Error::BadMagic { expected, found });
    }
    let len_bytes = bytes
        .get(8..12)
        .ok_or_else(|| Error::Manifest("file ends before manifest length".into()))?;
    let manifest_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let manifest_bytes = bytes.get(12..12 + manifest_len).ok_or_else(|| {
        Error::Manifest(format!("file ends inside the {manifest_len}-byte manifest"))
    })?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_slice(manifest_bytes).map_err(|e| Error::Manifest(e.to_string()))?;

    let data_start = align_up(12 + manifest_len);
    let data = bytes.get(data_start..).unwrap_or(&[]);
    let mut store = WeightStore::new();
    for entry in &entries {
        if entry.dtype != "f32" {
            return Err(Error::Manifest(format!(
                "tensor {:?} has dtype {:?}; only f32 is supported",
                entry.name, entry.dtype
            )));
        }
        if entry.offset % ALIGN != 0 {
            return Err(Error::Manifest(format!(
                "tensor {:?} offset {} is not {ALIGN}-byte aligned",
                entry.name, entry.offset
            )));
        }
        let end = entry
            .shape
            .iter()
            .try_fold(4usize, |n, &d| n.checked_mul(d))
            .and_then(|n| n.checked_add(entry.offset))
            .ok_or_else(|| Error::Manifest(format!("tensor {:?} extent overflows", entry.name)))?;
        let raw = data
            .get(entry.offset..end)
            .ok_or_else(|| Error::Truncated {
                name: entry.name.clone(),
                needed: data_start.saturating_add(end),
                available: bytes.len(),
            })?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), values)?;
        if store.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Manifest(format!(
                "duplicate tensor {:?}",
                entry.name
            )));
        }
    }
    Ok((entries, store))
}

pub fn read_vtw(path: impl AsRef<Path>) -> Result<(Vec<ManifestEntry>, WeightStore<f32>)> {
    parse_vtw(&std::fs::read(path)?)
}

/// Reads and validates a weight file for `config`. Unused tensors are kept
/// but reported through `log::warn!`.
pub fn load_weights(path: impl AsRef<Path>, config: &ViTConfig) -> Result<WeightStore<f32>> {
    let (_, store) = read_vtw(path)?;
    let extras = store.validate(config)?;
    if !extras.is_empty() {
        log::warn!(
            "weight file has {} unused tensors: {extras:?}",
            extras.len()
        );
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store() -> WeightStore<f32> {
        WeightStore::random(&ViTConfig::tiny(), 7, 0.1).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let store = tiny_store();
        let bytes = to_vtw_bytes(&store).unwrap();
        let (entries, back) = parse_vtw(&bytes).unwrap();
        assert_eq!(entries.len(), store.len());
        for (name, t) in store.iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            assert!(t
                .data()
                .iter()
                .zip(u.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn tensors_are_64_byte_aligned() {
        let bytes = to_vtw_bytes(&tiny_store()).unwrap();
        let (entries, _) = parse_vtw(&bytes).unwrap();
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let start = align_up(12 + manifest_len);
        assert_eq!(start % 64, 0);
        assert!(entries.iter().all(|e| (start + e.offset) % 64 == 0));
    }

    #[test]
    fn empty_file_is_a_magic_error() {
        let err = parse_vtw(&[]).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("VITWGT01"));
    }

    #[test]
    fn other_version_is_reported() {
        let mut bytes = to_vtw_bytes(&tiny_store()).unwrap();
        bytes[7] = b'2';
        assert!(matches!(
            parse_vtw(&bytes),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn truncated_data_names_the_tensor() {
        let bytes = to_vtw_bytes(&tiny_store()).unwrap();
        let err = parse_vtw(&bytes[..bytes.len() - 100]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn huge_extent_is_an_error() {
        let manifest =
            br#"[{"name":"x","dtype":"f32","shape":[4294967296,4294967296],"offset":0}]"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(manifest);
        assert!(matches!(parse_vtw(&bytes), Err(Error::Manifest(_))));
    }

    #[test]
    fn wrong_shape_names_the_tensor() {
        let config = ViTConfig::tiny();
        let mut store = tiny_store();
        store.insert("blocks.1.attn.proj.weight", Tensor::zeros([16, 15]));
        let err = store.validate(&config).unwrap_err();
        assert!(
            err.to_string().contains("blocks.1.attn.proj.weight"),
            "{err}"
        );
    }

    #[test]
    fn missing_head_is_reported() {
        let mut store = tiny_store();
        store.remove("head.weight");
        let err = store.validate(&ViTConfig::tiny()).unwrap_err();
        assert!(err.to_string().contains("head.weight"));
    }

    #[test]
    fn extras_are_listed_not_rejected() {
        let mut store = tiny_store();
        store.insert("head_dist.weight", Tensor::zeros([2, 16]));
        assert_eq!(
            store.validate(&ViTConfig::tiny()).unwrap(),
            vec!["head_dist.weight"]
        );
    }

    #[test]
    fn random_init_is_deterministic() {
        let a = tiny_store();
        let b = tiny_store();
        assert_eq!(to_vtw_bytes(&a).unwrap(), to_vtw_bytes(&b).unwrap());
    }
}
