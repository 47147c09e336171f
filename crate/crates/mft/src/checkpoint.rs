//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "MFTCKPT1"
//! version      u32
//! header_len   u64
//! header       JSON, header_len bytes
//! payload      f32 values, row-major, tensors in header order
//! ```
//!
//! The header records the model configuration, the encoding schema (code
//! tables and normalization statistics), the sampler settings and a table
//! of `{name, shape, offset}` entries with byte offsets into the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use mft_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MftError, Result};
use crate::ingest::{EncodingSchema, SamplerConfig};
use crate::model::{MftConfig, MftParameters};

pub const MAGIC: &[u8; 8] = b"MFTCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model: MftConfig,
    pub schema: EncodingSchema,
    pub sampler: SamplerConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MftConfig,
    pub schema: EncodingSchema,
    pub sampler: SamplerConfig,
    pub params: MftParameters<f32>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.params.check_against(&self.model)?;
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            schema: self.schema.clone(),
            sampler: self.sampler.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.params.iter() {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint> {
        let corrupt = |m: String| MftError::Data(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let header_len = u64::from_le_bytes(u64buf);
        let mut json = vec![0u8; header_len as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.format_version != version {
            return Err(corrupt("header and preamble versions disagree".into()));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = IndexMap::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * numel;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| corrupt(format!("payload truncated in {}", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        let params = MftParameters::from_tensors(tensors);
        params
            .check_against(&header.model)
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(Checkpoint {
            model: header.model,
            schema: header.schema,
            sampler: header.sampler,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::read_from(BufReader::new(File::open(path)?))
    }

    /// Loads and fails unless the stored model configuration equals `expected`.
    pub fn load_for(path: &Path, expected: &MftConfig) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        if &ckpt.model != expected {
            return Err(MftError::Config(format!(
                "checkpoint model {} does not match the requested model {}",
                serde_json::to_string(&ckpt.model)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Flavor;
    use crate::testing::toy_config;

    fn sample() -> Checkpoint {
        let model = toy_config(Flavor::Pie);
        Checkpoint {
            params: MftParameters::init(&model, 7).unwrap(),
            model,
            schema: EncodingSchema::new(Flavor::Pie),
            sampler: SamplerConfig::default(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut c = sample();
        // values whose bit patterns are easy to lose
        let t = c.params.get_mut("head.fc2.bias").unwrap();
        t.data_mut()[0] = -0.0;
        let t = c.params.get_mut("head.fc1.bias").unwrap();
        t.data_mut()[0] = f32::MIN_POSITIVE / 4.0;
        t.data_mut()[1] = f32::MAX;
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        for ((n1, a), (n2, b)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{n1}");
        }
        assert_eq!(back.model, c.model);
        assert_eq!(back.schema, c.schema);
    }

    #[test]
    fn layout_preamble() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"MFTCKPT1");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&buf[20..20 + hlen]).unwrap();
        let payload = buf.len() - 20 - hlen;
        assert_eq!(payload, 4 * crate::model::param_count(&header.model));
        let last = header.tensors.last().unwrap();
        assert_eq!(last.name, "head.fc2.bias");
        assert_eq!(last.offset as usize, payload - 4);
    }

    #[test]
    fn corruption_is_detected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(truncated).is_err());
    }

    #[test]
    fn config_mismatch_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert!(Checkpoint::load_for(&path, &c.model).is_ok());
        let other = MftConfig {
            use_e: false,
            ..c.model.clone()
        };
        assert!(matches!(
            Checkpoint::load_for(&path, &other),
            Err(MftError::Config(_))
        ));
    }
}
