//! Named f32 tensors and the `.nncw` weight file.
//!
//! ```text
//! magic        4 bytes  "NNCW"
//! version      u16      1
//! fingerprint  32 bytes SHA-256 of the config's canonical text
//! count        u32      number of records
//! count x record header:
//!   name_len   u16, name (UTF-8, name_len bytes)
//!   dtype      u8       0 = f32
//!   ndim       u8, dims (u32 each)
//!   offset     u64      byte offset into the data section
//!   nbytes     u64      = 4 * product(dims)
//! data section: record payloads, little-endian f32, in header order
//! ```
//!
//! All integers are little-endian. Records are written sorted by name with
//! contiguous payloads, so identical maps serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::Cursor;
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::generator::{build_decoder, build_encoder, GeneratorGraph};

pub const MAGIC: &[u8; 4] = b"NNCW";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor data", n, data.len()));
        }
        Ok(Self { shape, data })
    }
}

fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightMap {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Data of record `name`, which must have exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let t = self.get(name).ok_or_else(|| Error::MissingRecord(name.to_string()))?;
        if t.shape != shape {
            return Err(Error::shape(format!("record `{name}`"), fmt_shape(shape), fmt_shape(&t.shape)));
        }
        Ok(&t.data)
    }

    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> WeightMap {
        WeightMap {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    let data = t.data.iter().map(|&v| f(v)).collect();
                    (k.clone(), Tensor { shape: t.shape.clone(), data })
                })
                .collect(),
        }
    }

    /// Checks every planned record of `graphs` and returns warnings for
    /// records no graph uses.
    pub fn validate(&self, graphs: &[&GeneratorGraph]) -> Result<Vec<String>> {
        let mut used = std::collections::HashSet::new();
        for graph in graphs {
            for plan in graph.tensor_plan() {
                self.expect(&plan.name, &plan.shape)?;
                used.insert(plan.name);
            }
        }
        Ok(self
            .tensors
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|k| format!("unused record `{k}`"))
            .collect())
    }
}

/// Deterministic weights for `graph`: conv weights uniform in
/// `±1/sqrt(in_channels * kernel)`, zero biases and unit snake alphas.
pub fn random_init(graph: &GeneratorGraph, seed: u64) -> WeightMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = WeightMap::new();
    fill_random(&mut map, graph, &mut rng);
    map
}

fn fill_random(map: &mut WeightMap, graph: &GeneratorGraph, rng: &mut ChaCha8Rng) {
    for plan in graph.tensor_plan() {
        let n: usize = plan.shape.iter().product();
        let data = if plan.name.ends_with(".weight") {
            let fan_in = (plan.shape[1] * plan.shape[2]) as f32;
            let bound = 1.0 / fan_in.sqrt();
            (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
        } else if plan.name.ends_with(".alpha") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        map.insert(plan.name, Tensor { shape: plan.shape, data });
    }
}

/// Random weights for both the encoder and the decoder of `config`.
pub fn random_init_codec(config: &CodecConfig, seed: u64) -> Result<WeightMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = WeightMap::new();
    fill_random(&mut map, &build_encoder(config)?, &mut rng);
    fill_random(&mut map, &build_decoder(config)?, &mut rng);
    Ok(map)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub fingerprint: [u8; 32],
    pub weights: WeightMap,
}

impl WeightFile {
    pub fn for_config(config: &CodecConfig, weights: WeightMap) -> Self {
        Self {
            fingerprint: config.fingerprint(),
            weights,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.weights.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let nbytes = 4 * t.data.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&nbytes.to_le_bytes());
            offset += nbytes;
        }
        for (_, t) in self.weights.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes, "weight file");
        if &cur.array::<4>()? != MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let fingerprint = cur.array::<32>()?;
        let count = cur.u32()? as usize;

        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: u64,
            nbytes: u64,
        }
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let dtype = cur.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("record `{name}`: unsupported dtype {dtype}")));
            }
            let ndim = cur.u8()? as usize;
            let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = cur.u64()?;
            let nbytes = cur.u64()?;
            entries.push(Entry { name, shape, offset, nbytes });
        }

        let data = cur.remaining();
        let mut weights = WeightMap::new();
        let mut expected_offset = 0u64;
        for e in entries {
            let n: usize = e.shape.iter().product();
            if e.nbytes != 4 * n as u64 {
                return Err(Error::Format(format!(
                    "record `{}`: {} bytes for shape {:?}",
                    e.name, e.nbytes, e.shape
                )));
            }
            if e.offset != expected_offset || e.offset + e.nbytes > data.len() as u64 {
                return Err(Error::Format(format!("record `{}`: payload out of bounds", e.name)));
            }
            let raw = &data[e.offset as usize..(e.offset + e.nbytes) as usize];
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if weights.insert(e.name.clone(), Tensor { shape: e.shape, data: values }).is_some() {
                return Err(Error::Format(format!("duplicate record `{}`", e.name)));
            }
            expected_offset += e.nbytes;
        }
        if expected_offset != data.len() as u64 {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last record",
                data.len() as u64 - expected_offset
            )));
        }
        Ok(Self { fingerprint, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A weight map that has been validated against a config's graphs.
#[derive(Clone, Debug)]
pub struct LoadedWeights {
    pub weights: WeightMap,
    pub warnings: Vec<String>,
}

/// Checks a parsed weight file against `config`: fingerprint (unless
/// `force`), then every encoder and decoder record.
pub fn validate_file(file: WeightFile, config: &CodecConfig, force: bool) -> Result<LoadedWeights> {
    let mut warnings = Vec::new();
    let expected = config.fingerprint();
    if file.fingerprint != expected {
        if !force {
            return Err(Error::Fingerprint {
                file: hex(&file.fingerprint[..8]),
                config: hex(&expected[..8]),
            });
        }
        warnings.push("config fingerprint mismatch ignored".to_string());
    }
    let enc = build_encoder(config)?;
    let dec = build_decoder(config)?;
    warnings.extend(file.weights.validate(&[&enc, &dec])?);
    Ok(LoadedWeights {
        weights: file.weights,
        warnings,
    })
}

pub fn load(path: impl AsRef<Path>, config: &CodecConfig, force: bool) -> Result<LoadedWeights> {
    validate_file(WeightFile::read(path)?, config, force)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::builtin;
    use proptest::prelude::*;

    fn toy() -> CodecConfig {
        let mut c = builtin("12.5fps-1.1kbps-causal").unwrap();
        c.encoder_initial_channels = 2;
        c.decoder_initial_channels = 32;
        c
    }

    #[test]
    fn random_weights_round_trip_cleanly() {
        let c = toy();
        let file = WeightFile::for_config(&c, random_init_codec(&c, 1).unwrap());
        let bytes = file.to_bytes();
        let back = WeightFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_bytes(), bytes);
        let loaded = validate_file(back, &c, false).unwrap();
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn seeds_control_the_weights() {
        let c = toy();
        let a = WeightFile::for_config(&c, random_init_codec(&c, 5).unwrap()).to_bytes();
        let b = WeightFile::for_config(&c, random_init_codec(&c, 5).unwrap()).to_bytes();
        let other = WeightFile::for_config(&c, random_init_codec(&c, 6).unwrap()).to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, other);
    }

    #[test]
    fn init_ranges() {
        let c = toy();
        let w = random_init_codec(&c, 2).unwrap();
        for (name, t) in w.iter() {
            if name.ends_with(".weight") {
                let bound = 1.0 / ((t.shape[1] * t.shape[2]) as f32).sqrt();
                assert!(t.data.iter().all(|v| v.abs() <= bound));
            } else if name.ends_with(".alpha") {
                assert!(t.data.iter().all(|&v| v == 1.0));
            } else {
                assert!(t.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn missing_record_names_the_node() {
        let c = toy();
        let mut w = random_init_codec(&c, 1).unwrap();
        w.remove("dec.stages.2.up.weight");
        let err = validate_file(WeightFile::for_config(&c, w), &c, false).unwrap_err();
        assert!(matches!(&err, Error::MissingRecord(n) if n == "dec.stages.2.up.weight"), "{err}");
    }

    #[test]
    fn transposed_shape_is_rejected_with_both_shapes() {
        let c = toy();
        let mut w = random_init_codec(&c, 1).unwrap();
        let t = w.get_mut("enc.stages.0.down.weight").unwrap();
        t.shape.swap(0, 1);
        let err = validate_file(WeightFile::for_config(&c, w), &c, false).unwrap_err().to_string();
        assert!(err.contains("[4, 2, 4]") && err.contains("[2, 4, 4]"), "{err}");
    }

    #[test]
    fn fingerprint_mismatch_and_force() {
        let c = toy();
        let mut other = c.clone();
        other.decoder_causal = false;
        let file = WeightFile::for_config(&other, random_init_codec(&c, 1).unwrap());
        assert!(matches!(validate_file(file.clone(), &c, false), Err(Error::Fingerprint { .. })));
        let loaded = validate_file(file, &c, true).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn unused_records_are_warnings() {
        let c = toy();
        let mut w = random_init_codec(&c, 1).unwrap();
        w.insert("extra.weight", Tensor::new(vec![1], vec![0.0]).unwrap());
        let loaded = validate_file(WeightFile::for_config(&c, w), &c, false).unwrap();
        assert_eq!(loaded.warnings, vec!["unused record `extra.weight`".to_string()]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = toy();
        let bytes = WeightFile::for_config(&c, random_init_codec(&c, 1).unwrap()).to_bytes();
        assert!(WeightFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(WeightFile::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(WeightFile::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(WeightFile::from_bytes(&version).is_err());
    }

    #[test]
    fn every_single_record_mutation_is_caught() {
        let c = toy();
        let base = random_init_codec(&c, 3).unwrap();
        let names: Vec<String> = base.iter().map(|(k, _)| k.clone()).collect();
        for name in &names {
            let mut deleted = base.clone();
            deleted.remove(name);
            let err = validate_file(WeightFile::for_config(&c, deleted), &c, false).unwrap_err();
            assert!(matches!(&err, Error::MissingRecord(n) if n == name));

            let mut renamed = base.clone();
            let t = renamed.remove(name).unwrap();
            renamed.insert(format!("{name}_x"), t);
            let err = validate_file(WeightFile::for_config(&c, renamed), &c, false).unwrap_err();
            assert!(matches!(&err, Error::MissingRecord(n) if n == name));

            let mut reshaped = base.clone();
            let t = reshaped.get_mut(name).unwrap();
            t.shape.push(1);
            let err = validate_file(WeightFile::for_config(&c, reshaped), &c, false).unwrap_err();
            assert!(matches!(&err, Error::Shape { what, .. } if what.contains(name.as_str())));
        }
    }

    proptest! {
        #[test]
        fn arbitrary_maps_round_trip(
            records in proptest::collection::btree_map(
                "[a-z.]{1,12}",
                proptest::collection::vec(any::<f32>(), 0..20),
                0..6,
            ),
            fingerprint in any::<[u8; 32]>(),
        ) {
            let mut weights = WeightMap::new();
            for (name, data) in records {
                weights.insert(name, Tensor { shape: vec![data.len()], data });
            }
            let file = WeightFile { fingerprint, weights };
            let bytes = file.to_bytes();
            let back = WeightFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
