//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 manifest length, the JSON
//! manifest, then every tensor as little-endian f64 in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use punchline_autograd::Matrix;
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelKind, Seq2Seq};
use crate::nn::Partition;
use crate::optim::Adam;
use crate::tokenizer::Tokenizer;
use crate::training::{TrainConfig, TrainState, Trainer};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PLCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub partition: Partition,
    pub section: Section,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tokenizer_merges: Vec<String>,
    pub state: TrainState,
    /// TOML of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub run_config: Option<String>,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Model, tokenizer and (optionally) the optimizer and progress of a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub tokenizer: Tokenizer,
    pub train: TrainConfig,
    pub state: TrainState,
    pub optimizer: Option<Adam>,
    pub run_config: Option<String>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, tokenizer: &Tokenizer) -> Self {
        Self {
            model: trainer.model.clone(),
            tokenizer: tokenizer.clone(),
            train: trainer.config.clone(),
            state: trainer.state.clone(),
            optimizer: Some(trainer.optimizer.clone()),
            run_config: None,
        }
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.model, self.train)?;
        if let Some(opt) = self.optimizer {
            trainer.optimizer = opt;
        }
        trainer.state = self.state;
        Ok(trainer)
    }

    pub fn manifest(&self) -> Manifest {
        let mut tensors = Vec::new();
        let mut push = |section: Section| {
            for (_, p) in self.model.store.iter() {
                tensors.push(TensorEntry {
                    name: p.name.clone(),
                    shape: [p.value.rows(), p.value.cols()],
                    partition: p.partition,
                    section,
                });
            }
        };
        push(Section::Param);
        if self.optimizer.is_some() {
            push(Section::AdamFirst);
            push(Section::AdamSecond);
        }
        Manifest {
            kind: self.model.kind,
            model: self.model.config.clone(),
            train: self.train.clone(),
            tokenizer_merges: self.tokenizer.merge_lines(),
            state: self.state.clone(),
            run_config: self.run_config.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        let manifest = serde_json::to_vec(&self.manifest()).map_err(std::io::Error::other)?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(&manifest)?;
        let mut blobs: Vec<&Matrix> = self.model.store.iter().map(|(_, p)| &p.value).collect();
        if let Some(opt) = &self.optimizer {
            blobs.extend(&opt.first);
            blobs.extend(&opt.second);
        }
        for m in blobs {
            for v in m.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(|_| corrupt("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(|_| corrupt("truncated header"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(corrupt("manifest too large"));
        }
        let mut raw = vec![0u8; len];
        input.read_exact(&mut raw).map_err(|_| corrupt("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&raw).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;

        let tokenizer = Tokenizer::from_merge_lines(&manifest.tokenizer_merges)?;
        let mut model = Seq2Seq::new(manifest.model.clone(), manifest.kind, 0)?;
        let mut optimizer = manifest.optimizer_step.map(|step| {
            let mut adam = Adam::new(manifest.train.adam(), &model.store);
            adam.step = step;
            adam
        });
        let mut buf = [0u8; 8];
        let mut seen = vec![[false; 3]; model.store.len()];
        for entry in &manifest.tensors {
            let id = model
                .store
                .by_name(&entry.name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown tensor {}", entry.name)))?;
            let expected = model.store.value(id).shape();
            if expected != (entry.shape[0], entry.shape[1]) || model.store.param(id).partition != entry.partition {
                return Err(Error::CorruptCheckpoint(format!("tensor {} does not match its config", entry.name)));
            }
            let mut data = Vec::with_capacity(expected.0 * expected.1);
            for _ in 0..expected.0 * expected.1 {
                input.read_exact(&mut buf).map_err(|_| corrupt("truncated tensor data"))?;
                data.push(f64::from_le_bytes(buf));
            }
            let m = Matrix::from_vec(expected.0, expected.1, data);
            let slot = match entry.section {
                Section::Param => 0,
                Section::AdamFirst => 1,
                Section::AdamSecond => 2,
            };
            seen[id.index()][slot] = true;
            match (entry.section, optimizer.as_mut()) {
                (Section::Param, _) => *model.store.value_mut(id) = m,
                (Section::AdamFirst, Some(o)) => o.first[id.index()] = m,
                (Section::AdamSecond, Some(o)) => o.second[id.index()] = m,
                (_, None) => return Err(corrupt("optimizer tensor without optimizer state")),
            }
        }
        if seen.iter().any(|s| !s[0]) {
            return Err(corrupt("missing parameter tensors"));
        }
        if input.read(&mut buf).map_err(|e| Error::CorruptCheckpoint(e.to_string()))? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { model, tokenizer, train: manifest.train, state: manifest.state, optimizer, run_config: manifest.run_config })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Example;

    fn setup() -> (Tokenizer, Trainer, Vec<Example>) {
        let tok = Tokenizer::train(["a small test corpus", "of tiny jokes"].iter().copied(), 280);
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 8,
            gat_layers: 1,
            gat_heads: 2,
            ..ModelConfig::desk()
        };
        let model = Seq2Seq::new(cfg, ModelKind::Fused, 4).unwrap();
        let trainer = Trainer::new(model, TrainConfig { batch_size: 2, ..TrainConfig::default() }).unwrap();
        let data = ["a small", "test corpus", "of tiny"]
            .iter()
            .map(|s| Example { source: tok.encode(s), target: tok.encode("jokes"), graph: None })
            .collect();
        (tok, trainer, data)
    }

    #[test]
    fn resume_is_bit_exact() {
        let (tok, mut trainer, data) = setup();
        trainer.train_step(&data).unwrap();
        let mut bytes = Vec::new();
        Checkpoint::from_trainer(&trainer, &tok).write_to(&mut bytes).unwrap();
        let mut resumed = Checkpoint::read_from(&mut bytes.as_slice()).unwrap().into_trainer().unwrap();
        for _ in 0..3 {
            let a = trainer.train_step(&data).unwrap();
            let b = resumed.train_step(&data).unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        for ((_, x), (_, y)) in trainer.model.store.iter().zip(resumed.model.store.iter()) {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(trainer.optimizer, resumed.optimizer);
    }

    #[test]
    fn manifest_records_partitions_and_tokenizer() {
        let (tok, trainer, _) = setup();
        let ck = Checkpoint::from_trainer(&trainer, &tok);
        let m = ck.manifest();
        assert!(m.tensors.iter().any(|t| t.partition == Partition::KnowledgeOnly && t.name.contains("fusion.gate")));
        assert_eq!(Tokenizer::from_merge_lines(&m.tokenizer_merges).unwrap(), tok);
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let (tok, trainer, _) = setup();
        let mut bytes = Vec::new();
        Checkpoint::from_trainer(&trainer, &tok).write_to(&mut bytes).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &truncated[..]), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::CorruptCheckpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::read_from(&mut extra.as_slice()), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let (tok, trainer, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let ck = Checkpoint { optimizer: None, ..Checkpoint::from_trainer(&trainer, &tok) };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.optimizer.is_none());
        for ((_, x), (_, y)) in ck.model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(x.value, y.value);
        }
    }
}
