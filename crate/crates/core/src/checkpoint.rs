//! Versioned binary container for model weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "EMBRANK\0" | version u32 | meta_len u64 | meta (JSON)
//! section_count u32 | per section: name, tensor_count u32,
//!     per tensor: name, rows u64, cols u64, rows*cols f32 values
//! ```
//!
//! Names are a u32 byte length followed by UTF-8 bytes. Weights are held as
//! f64 in memory and stored as f32, so saving rounds once and a loaded model
//! saves back to the same bytes.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LmConfig, TEMPLATE_VERSION};
use crate::model::{Model, ModelConfig, Stage};
use crate::numerics::{Activation, ParamSet};
use crate::retrieval::Pooling;

pub const MAGIC: &[u8; 8] = b"EMBRANK\0";
pub const FORMAT_VERSION: u32 = 1;
const SECTIONS: [&str; 3] = ["encoder", "projector", "lm"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub hash_size: usize,
    pub d_enc: usize,
    pub pooling: Pooling,
    pub activation: Activation,
    pub lm: LmConfig,
    pub template_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub encoder_seed: u64,
}

impl CheckpointMeta {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hash_size: self.hash_size,
            d_enc: self.d_enc,
            pooling: self.pooling,
            activation: self.activation,
            lm: self.lm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: Vec<Section>,
}

fn section_of(param: &str) -> Result<&'static str> {
    SECTIONS
        .iter()
        .find(|s| param.strip_prefix(**s).is_some_and(|rest| rest.starts_with('.')))
        .copied()
        .ok_or_else(|| Error::Format(format!("parameter `{param}` belongs to no section")))
}

impl Checkpoint {
    pub fn from_model(model: &Model, stage: Stage, seed: u64, encoder_seed: u64) -> Result<Self> {
        let cfg = model.config();
        let meta = CheckpointMeta {
            hash_size: cfg.hash_size,
            d_enc: cfg.d_enc,
            pooling: cfg.pooling,
            activation: cfg.activation,
            lm: cfg.lm,
            template_version: TEMPLATE_VERSION,
            stage,
            seed,
            encoder_seed,
        };
        let mut sections: Vec<Section> = SECTIONS
            .iter()
            .map(|s| Section {
                name: (*s).to_string(),
                tensors: Vec::new(),
            })
            .collect();
        let mut failure = None;
        model.visit(&mut |name, p| match section_of(name) {
            Ok(sec) => {
                let slot = sections.iter_mut().find(|s| s.name == sec).expect("known section");
                slot.tensors.push(Tensor {
                    name: name.to_string(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    values: p.value.data().iter().map(|&v| v as f32).collect(),
                });
            }
            Err(e) => failure = Some(e),
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(Self { meta, sections })
    }

    /// Rebuilds the model, checking every tensor against the shapes implied
    /// by the metadata.
    pub fn to_model(&self) -> Result<Model> {
        if self.meta.template_version != TEMPLATE_VERSION {
            return Err(Error::Format(format!(
                "checkpoint uses prompt templates v{}, this build has v{TEMPLATE_VERSION}",
                self.meta.template_version
            )));
        }
        let cfg = self.meta.model_config();
        cfg.lm.validate()?;
        let mut model = Model::new(&cfg, self.meta.encoder_seed, self.meta.seed)?;
        let mut by_name: HashMap<&str, &Tensor> = HashMap::new();
        for sec in &self.sections {
            for t in &sec.tensors {
                if section_of(&t.name)? != sec.name {
                    return Err(Error::Format(format!("tensor `{}` filed under section `{}`", t.name, sec.name)));
                }
                if by_name.insert(&t.name, t).is_some() {
                    return Err(Error::Format(format!("tensor `{}` appears twice", t.name)));
                }
            }
        }
        let mut failure = None;
        model.visit_mut(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => failure = Some(Error::Format(format!("checkpoint lacks tensor `{name}`"))),
                Some(t) if (t.rows, t.cols) != p.value.shape() => {
                    failure = Some(Error::Format(format!(
                        "tensor `{name}` is {}x{}, expected {}x{}",
                        t.rows,
                        t.cols,
                        p.value.rows(),
                        p.value.cols()
                    )))
                }
                Some(t) => {
                    for (dst, &src) in p.value.data_mut().iter_mut().zip(&t.values) {
                        *dst = f64::from(src);
                    }
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("checkpoint holds unknown tensor `{extra}`")));
        }
        Ok(model)
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for s in &self.sections {
            write_name(&mut w, &s.name)?;
            w.write_all(&(s.tensors.len() as u32).to_le_bytes())?;
            for t in &s.tensors {
                write_name(&mut w, &t.name)?;
                w.write_all(&(t.rows as u64).to_le_bytes())?;
                w.write_all(&(t.cols as u64).to_le_bytes())?;
                let mut buf = Vec::with_capacity(4 * t.values.len());
                for v in &t.values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_len(&mut r, 1 << 20)?;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
        let section_count = read_u32(&mut r)? as usize;
        let mut sections = Vec::with_capacity(section_count.min(16));
        for _ in 0..section_count {
            let name = read_name(&mut r)?;
            let tensor_count = read_u32(&mut r)? as usize;
            let mut tensors = Vec::with_capacity(tensor_count.min(1024));
            for _ in 0..tensor_count {
                let tname = read_name(&mut r)?;
                let rows = read_len(&mut r, 1 << 32)?;
                let cols = read_len(&mut r, 1 << 32)?;
                let count = rows
                    .checked_mul(cols)
                    .filter(|&c| c <= 1 << 31)
                    .ok_or_else(|| Error::Format(format!("tensor `{tname}` is implausibly large")))?;
                let mut bytes = vec![0u8; 4 * count];
                read_exact(&mut r, &mut bytes)?;
                let values = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                tensors.push(Tensor {
                    name: tname,
                    rows,
                    cols,
                    values,
                });
            }
            sections.push(Section { name, tensors });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, sections })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len(r: &mut impl Read, max: u64) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let v = u64::from_le_bytes(b);
    if v > max {
        return Err(Error::Format(format!("length field {v} exceeds {max}")));
    }
    Ok(v as usize)
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::Format(format!("name of {len} bytes")));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("name is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_digest;

    fn small() -> ModelConfig {
        ModelConfig {
            hash_size: 64,
            d_enc: 8,
            lm: LmConfig {
                vocab_size: 64,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
                max_seq: 64,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn load_then_save_is_byte_identical() {
        let model = Model::new(&small(), 3, 4).unwrap();
        let bytes = Checkpoint::from_model(&model, Stage::Align, 4, 3).unwrap().to_bytes().unwrap();
        let ck = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), bytes);
        let reloaded = ck.to_model().unwrap();
        let again = Checkpoint::from_model(&reloaded, Stage::Align, 4, 3).unwrap().to_bytes().unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn round_trip_rounds_to_f32_once() {
        let model = Model::new(&small(), 1, 2).unwrap();
        let ck = Checkpoint::from_model(&model, Stage::Rank, 2, 1).unwrap();
        let back = ck.to_model().unwrap();
        let mut max_rel: f64 = 0.0;
        let mut orig = Vec::new();
        model.visit(&mut |_, p| orig.extend_from_slice(p.value.data()));
        let mut i = 0;
        back.visit(&mut |_, p| {
            for &v in p.value.data() {
                let o = orig[i];
                i += 1;
                assert_eq!(v, o as f32 as f64);
                if o != 0.0 {
                    max_rel = max_rel.max(((v - o) / o).abs());
                }
            }
        });
        assert!(max_rel < 1e-7);
        let twice = Checkpoint::from_model(&back, Stage::Rank, 2, 1).unwrap().to_model().unwrap();
        assert_eq!(param_digest(&twice), param_digest(&back));
    }

    #[test]
    fn metadata_survives() {
        let model = Model::new(&small(), 5, 6).unwrap();
        let ck = Checkpoint::from_model(&model, Stage::Rank, 6, 5).unwrap();
        let back = Checkpoint::read(ck.to_bytes().unwrap().as_slice()).unwrap();
        assert_eq!(back.meta.stage, Stage::Rank);
        assert_eq!(back.meta.seed, 6);
        assert_eq!(back.meta.model_config(), small());
        assert_eq!(back.sections.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), SECTIONS);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = Model::new(&small(), 0, 0).unwrap();
        let bytes = Checkpoint::from_model(&model, Stage::Align, 0, 0).unwrap().to_bytes().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::read(bad_magic.as_slice()), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::read(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::read(extra.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let model = Model::new(&small(), 0, 0).unwrap();
        let mut ck = Checkpoint::from_model(&model, Stage::Align, 0, 0).unwrap();
        ck.meta.lm.d_model = 16;
        ck.meta.lm.d_ff = 32;
        assert!(matches!(ck.to_model(), Err(Error::Format(_))));
        let mut ck = Checkpoint::from_model(&model, Stage::Align, 0, 0).unwrap();
        ck.sections[1].tensors.pop();
        assert!(matches!(ck.to_model(), Err(Error::Format(_))));
    }
}
