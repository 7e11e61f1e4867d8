//! Versioned binary container for named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "TDNNASCK"
//! offset 8   u32       format version (currently 1)
//! offset 12  u64       header length H in bytes
//! offset 20  H bytes   UTF-8 JSON header
//! 20 + H     f64 * n   array data, arrays back to back in header order
//! end - 8    u64       FNV-1a 64 checksum of every preceding byte
//! ```
//!
//! The header holds the checkpoint kind, an optional stage tag, a map of
//! serialized configs, a metadata map and an array table of
//! `{group, name, shape, offset, len}` entries where `offset` and `len`
//! count f64 elements from the start of the data section. The header
//! carries no timestamps, so saving the same state twice gives the same
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::predictor::{Metric, Normalization, PredictorModel};
use crate::space::{fnv1a64, SpaceConfig, Stage, SubnetSpec};
use crate::supernet::{build, ExportedSubnet, SupernetConfig, SupernetWeights};

pub const MAGIC: &[u8; 8] = b"TDNNASCK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

pub const KIND_SUPERNET: &str = "supernet";
pub const KIND_SUBNET: &str = "subnet";
pub const KIND_PREDICTOR: &str = "predictor";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub group: String,
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub stage: Option<Stage>,
    pub configs: BTreeMap<String, Value>,
    pub metadata: BTreeMap<String, Value>,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    stage: Option<Stage>,
    configs: BTreeMap<String, Value>,
    metadata: BTreeMap<String, Value>,
    arrays: Vec<ArrayEntry>,
}

fn corrupt(offset: usize, detail: impl Into<String>) -> Error {
    Error::Corrupt {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("eight bytes"))
}

impl Checkpoint {
    pub fn new(kind: &str, stage: Option<Stage>) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("writer".to_string(), Value::from(format!("tdnnas {}", env!("CARGO_PKG_VERSION"))));
        Self {
            kind: kind.to_string(),
            stage,
            configs: BTreeMap::new(),
            metadata,
            arrays: Vec::new(),
        }
    }

    pub fn set_config<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.configs.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .configs
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint has no `{key}` config")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn push_store(&mut self, group: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.arrays.push(NamedArray {
                group: group.to_string(),
                name: name.to_string(),
                tensor: t.clone(),
            });
        }
    }

    /// Rebuilds a store from the arrays of `group`, in file order.
    pub fn store(&self, group: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for a in self.arrays.iter().filter(|a| a.group == group) {
            store.insert(a.name.clone(), a.tensor.clone())?;
        }
        Ok(store)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for a in &self.arrays {
            entries.push(ArrayEntry {
                group: a.group.clone(),
                name: a.name.clone(),
                shape: a.tensor.shape().to_vec(),
                offset,
                len: a.tensor.len(),
            });
            offset += a.tensor.len();
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            stage: self.stage,
            configs: self.configs.clone(),
            metadata: self.metadata.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + 8 * offset + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in a.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(corrupt(bytes.len(), format!("truncated preamble ({} of {PREAMBLE} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt(0, "bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = read_u64(bytes, 12) as usize;
        let header_end = PREAMBLE.saturating_add(header_len);
        if header_end > bytes.len() {
            return Err(corrupt(bytes.len(), format!("truncated header (declared {header_len} bytes)")));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| corrupt(PREAMBLE + e.column().saturating_sub(1), format!("malformed header: {e}")))?;
        let mut expected = 0usize;
        for (i, e) in header.arrays.iter().enumerate() {
            if e.offset != expected || e.shape.iter().product::<usize>() != e.len {
                return Err(corrupt(header_end, format!("array table entry {i} ({}) is inconsistent", e.name)));
            }
            expected += e.len;
        }
        let data_end = header_end + 8 * expected;
        if bytes.len() < data_end + 8 {
            return Err(corrupt(bytes.len(), format!("truncated data (expected {} bytes in total)", data_end + 8)));
        }
        if bytes.len() > data_end + 8 {
            return Err(corrupt(data_end + 8, "trailing bytes after checksum"));
        }
        let stored = read_u64(bytes, data_end);
        let actual = fnv1a64(&bytes[..data_end]);
        if stored != actual {
            return Err(corrupt(data_end, format!("checksum mismatch (stored {stored:#018x}, computed {actual:#018x})")));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let start = header_end + 8 * e.offset;
            let data = bytes[start..start + 8 * e.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            arrays.push(NamedArray {
                group: e.group,
                name: e.name,
                tensor: Tensor::new(e.shape, data)?,
            });
        }
        Ok(Self {
            kind: header.kind,
            stage: header.stage,
            configs: header.configs,
            metadata: header.metadata,
            arrays,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Fails unless `actual` has exactly the names and shapes of `reference`.
fn check_layout(what: &str, actual: &ParamStore, reference: &ParamStore) -> Result<()> {
    let a: Vec<_> = actual.iter().map(|(_, n, t)| (n, t.shape())).collect();
    let r: Vec<_> = reference.iter().map(|(_, n, t)| (n, t.shape())).collect();
    if a.len() != r.len() {
        return Err(Error::Config(format!("{what}: {} arrays, expected {}", a.len(), r.len())));
    }
    for ((an, ash), (rn, rsh)) in a.iter().zip(&r) {
        if an != rn || ash != rsh {
            return Err(Error::Config(format!("{what}: found {an} {ash:?}, expected {rn} {rsh:?}")));
        }
    }
    Ok(())
}

/// Supernet checkpoint. Arrays outside the network layout (such as the
/// classifier head added by the trainer) are stored under group `extra`.
pub fn supernet_checkpoint(weights: &SupernetWeights, stage: Option<Stage>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_SUPERNET, stage);
    ck.set_config("supernet", &weights.config)?;
    let reference = build(&weights.config, 0)?;
    for (_, name, t) in weights.params.iter() {
        let group = if reference.params.id(name).is_ok() { "params" } else { "extra" };
        ck.arrays.push(NamedArray {
            group: group.to_string(),
            name: name.to_string(),
            tensor: t.clone(),
        });
    }
    ck.push_store("buffers", &weights.buffers);
    Ok(ck)
}

pub fn supernet_from_checkpoint(ck: &Checkpoint) -> Result<SupernetWeights> {
    ck.expect_kind(KIND_SUPERNET)?;
    let config: SupernetConfig = ck.config("supernet")?;
    let reference = build(&config, 0)?;
    let mut params = ck.store("params")?;
    check_layout("supernet parameters", &params, &reference.params)?;
    for a in ck.arrays.iter().filter(|a| a.group == "extra") {
        params.insert(a.name.clone(), a.tensor.clone())?;
    }
    let buffers = ck.store("buffers")?;
    check_layout("supernet buffers", &buffers, &reference.buffers)?;
    Ok(SupernetWeights { config, params, buffers })
}

pub fn subnet_checkpoint(subnet: &ExportedSubnet) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_SUBNET, None);
    ck.set_config("supernet", &subnet.config)?;
    ck.set_config("spec", &subnet.spec)?;
    ck.push_store("params", &subnet.params);
    ck.push_store("buffers", &subnet.buffers);
    Ok(ck)
}

pub fn subnet_from_checkpoint(ck: &Checkpoint) -> Result<ExportedSubnet> {
    ck.expect_kind(KIND_SUBNET)?;
    let config: SupernetConfig = ck.config("supernet")?;
    let spec: SubnetSpec = ck.config("spec")?;
    config.check_spec(&spec)?;
    Ok(ExportedSubnet {
        spec,
        config,
        params: ck.store("params")?,
        buffers: ck.store("buffers")?,
    })
}

pub fn predictor_checkpoint(model: &PredictorModel) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_PREDICTOR, None);
    ck.set_config("space", &model.space)?;
    ck.set_config("metric", &model.metric)?;
    ck.set_config("normalization", &model.norm)?;
    ck.push_store("params", &model.params);
    Ok(ck)
}

pub fn predictor_from_checkpoint(ck: &Checkpoint) -> Result<PredictorModel> {
    ck.expect_kind(KIND_PREDICTOR)?;
    let space: SpaceConfig = ck.config("space")?;
    space.check()?;
    let metric: Metric = ck.config("metric")?;
    let norm: Normalization = ck.config("normalization")?;
    Ok(PredictorModel {
        space,
        metric,
        norm,
        params: ck.store("params")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("test", Some(Stage::Depth));
        ck.set_config("x", &vec![1.5, -0.1]).unwrap();
        ck.arrays.push(NamedArray {
            group: "g".into(),
            name: "a".into(),
            tensor: Tensor::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0]).unwrap(),
        });
        ck.arrays.push(NamedArray {
            group: "g".into(),
            name: "b".into(),
            tensor: Tensor::scalar(std::f64::consts::PI),
        });
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.stage, Some(Stage::Depth));
        for (a, b) in ck.arrays.iter().zip(&back.arrays) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 19, 30, bytes.len() - 9, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Corrupt { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bit_flip_fails_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 12] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn other_versions_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn supernet_round_trip_keeps_layout() {
        let mut cfg = SupernetConfig::toy();
        cfg.input_channels = 6;
        let mut w = build(&cfg, 4).unwrap();
        w.params.insert("head.class_weights", Tensor::filled(&[3, cfg.embedding_dim], 0.5)).unwrap();
        let ck = supernet_checkpoint(&w, Some(Stage::Width1)).unwrap();
        let back = supernet_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, w);
        let mut broken = ck.clone();
        broken.arrays.retain(|a| a.name != "stem.bn.gamma");
        assert!(supernet_from_checkpoint(&broken).is_err());
    }
}
