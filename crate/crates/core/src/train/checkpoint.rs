//! Line-delimited checkpoint files: a header, then every parameter in
//! declaration order, then the Adam moments.

use super::adam::Adam;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, T2vModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: TrainConfig,
    pub manifest_hash: String,
    pub model: ModelSpec,
    pub step: u64,
    pub params: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entry {
    Param { name: String, shape: Vec<usize>, data: Vec<f64> },
    AdamM { name: String, data: Vec<f64> },
    AdamV { name: String, data: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub manifest_hash: String,
    pub model: T2vModel,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            manifest_hash: self.manifest_hash.clone(),
            model: self.model.spec.clone(),
            step: self.optimizer.t,
            params: self.model.store.len(),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        json_line(w, &self.header())?;
        for (_, p) in self.model.store.iter() {
            json_line(
                w,
                &Entry::Param {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                },
            )?;
        }
        for ((_, p), m) in self.model.store.iter().zip(&self.optimizer.m) {
            json_line(
                w,
                &Entry::AdamM {
                    name: p.name.clone(),
                    data: m.data().to_vec(),
                },
            )?;
        }
        for ((_, p), v) in self.model.store.iter().zip(&self.optimizer.v) {
            json_line(
                w,
                &Entry::AdamV {
                    name: p.name.clone(),
                    data: v.data().to_vec(),
                },
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, detail: String| Error::Parse { line, detail };
        let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty checkpoint".into()))?;
        let first = first?;
        let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| parse_err(1, e.to_string()))?;
        let mut model = T2vModel::new(header.model.clone())?;
        if model.store.len() != header.params {
            return Err(Error::contract(format!(
                "checkpoint lists {} parameters, the model declares {}",
                header.params,
                model.store.len()
            )));
        }
        let mut optimizer = Adam::new(&model.store);
        optimizer.t = header.step;
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        let n = ids.len();
        for slot in 0..3 * n {
            let (i, line) = lines
                .next()
                .ok_or_else(|| parse_err(slot + 2, "checkpoint is truncated".into()))?;
            let line = line?;
            let entry: Entry = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let id = ids[slot % n];
            let expect = model.store.param(id).name.clone();
            let shape = model.store.param(id).value.shape().to_vec();
            let mismatch = |what: &str, name: &str| {
                parse_err(i + 1, format!("expected {what} for {expect}, found {name}"))
            };
            match (slot / n, entry) {
                (0, Entry::Param { name, shape: s, data }) if name == expect => {
                    model.store.set(id, Tensor::new(s, data)?)?;
                }
                (1, Entry::AdamM { name, data }) if name == expect => {
                    optimizer.m[id.index()] = Tensor::new(shape, data)?;
                }
                (2, Entry::AdamV { name, data }) if name == expect => {
                    optimizer.v[id.index()] = Tensor::new(shape, data)?;
                }
                (0, e) => return Err(mismatch("param", e.name())),
                (1, e) => return Err(mismatch("adam_m", e.name())),
                (_, e) => return Err(mismatch("adam_v", e.name())),
            }
        }
        Ok(Self {
            config: header.config,
            manifest_hash: header.manifest_hash,
            model,
            optimizer,
        })
    }
}

impl Entry {
    fn name(&self) -> &str {
        match self {
            Entry::Param { name, .. } | Entry::AdamM { name, .. } | Entry::AdamV { name, .. } => name,
        }
    }
}

fn json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Io(e.into()))?;
    w.write_all(b"\n")?;
    Ok(())
}
