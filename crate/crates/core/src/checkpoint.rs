//! Model checkpoints: a versioned text line, a JSON header, then the
//! parameter matrices as `COGMAT02` (f64) blocks in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{InputSpace, LinearDecoder};
use crate::consensus::{ConsensusHead, ConsensusModel};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::matfile::{decode_matrix, encode_matrix, Precision};
use crate::trainer::{BatchNormState, Head, MultiStudyModel, TrainedRun};

pub const CHECKPOINT_MAGIC: &str = "COGCKPT 1";

/// SHA-256 (hex) of the JSON serialization of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configuration serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

/// Separately trained per-study decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSet {
    pub decoders: Vec<LinearDecoder>,
    /// Present for reduced decoders.
    pub dictionary: Option<Dictionary>,
}

impl BaselineSet {
    pub fn predict(&self, study_id: &str, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let d = self
            .decoders
            .iter()
            .find(|d| d.study_id == study_id)
            .ok_or_else(|| Error::UnknownStudy(study_id.to_string()))?;
        d.predict_maps(x, self.dictionary.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Baseline(BaselineSet),
    MultiStudy(TrainedRun),
    Consensus(ConsensusModel),
    Dictionary(Dictionary),
    /// A bare matrix, e.g. unlabeled samples.
    Data(Array2<f64>),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Baseline(_) => "baseline",
            Model::MultiStudy(_) => "multistudy",
            Model::Consensus(_) => "consensus",
            Model::Dictionary(_) => "dictionary",
            Model::Data(_) => "data",
        }
    }

    pub fn predict(&self, study_id: &str, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        match self {
            Model::Baseline(b) => b.predict(study_id, x),
            Model::MultiStudy(r) => r.model.predict(study_id, x),
            Model::Consensus(c) => c.predict(study_id, x),
            other => Err(Error::InvalidInput(format!("a {} checkpoint cannot decode", other.kind()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub provenance: Provenance,
    pub model: Model,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    seed: u64,
    config_hash: String,
    #[serde(default)]
    dictionary_names: Option<Vec<String>>,
    #[serde(default)]
    heads: Vec<HeadMeta>,
    #[serde(default)]
    scalars: BTreeMap<String, f64>,
    #[serde(default)]
    flags: BTreeMap<String, String>,
    blocks: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    study_id: String,
    contrast_names: Vec<String>,
    #[serde(default)]
    lambda: Option<f64>,
    #[serde(default)]
    input_space: Option<InputSpace>,
    #[serde(default)]
    dictionary_ref: Option<String>,
}

struct Blocks {
    names: Vec<String>,
    mats: Vec<Array2<f64>>,
}

impl Blocks {
    fn new() -> Self {
        Blocks {
            names: Vec::new(),
            mats: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, m: Array2<f64>) {
        self.names.push(name.into());
        self.mats.push(m);
    }

    fn push_row(&mut self, name: impl Into<String>, v: &Array1<f64>) {
        self.push(name, v.clone().insert_axis(ndarray::Axis(0)));
    }

    fn take(&mut self, name: &str) -> Result<Array2<f64>> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks block `{name}`")))?;
        self.names.remove(i);
        Ok(self.mats.remove(i))
    }

    fn take_row(&mut self, name: &str) -> Result<Array1<f64>> {
        let m = self.take(name)?;
        if m.nrows() != 1 {
            return Err(Error::Format(format!("block `{name}` should be a single row")));
        }
        Ok(m.row(0).to_owned())
    }
}

fn push_dictionary(blocks: &mut Blocks, d: &Dictionary) {
    blocks.push("dictionary", d.atoms().to_owned());
}

fn take_dictionary(blocks: &mut Blocks, names: Option<Vec<String>>) -> Result<Dictionary> {
    let d = Dictionary::new(blocks.take("dictionary")?)?;
    match names {
        Some(n) => d.with_names(n),
        None => Ok(d),
    }
}

pub fn save_model(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut blocks = Blocks::new();
    let mut header = Header {
        kind: ckpt.model.kind().to_string(),
        seed: ckpt.provenance.seed,
        config_hash: ckpt.provenance.config_hash.clone(),
        dictionary_names: None,
        heads: Vec::new(),
        scalars: BTreeMap::new(),
        flags: BTreeMap::new(),
        blocks: Vec::new(),
    };
    match &ckpt.model {
        Model::Baseline(set) => {
            if let Some(d) = &set.dictionary {
                header.dictionary_names = d.names().map(|n| n.to_vec());
                push_dictionary(&mut blocks, d);
            }
            for (j, dec) in set.decoders.iter().enumerate() {
                header.heads.push(HeadMeta {
                    study_id: dec.study_id.clone(),
                    contrast_names: dec.contrast_names.clone(),
                    lambda: Some(dec.lambda),
                    input_space: Some(dec.input_space),
                    dictionary_ref: dec.dictionary_ref.clone(),
                });
                blocks.push(format!("w{j}"), dec.weights.clone());
                blocks.push_row(format!("b{j}"), &dec.bias);
            }
        }
        Model::MultiStudy(run) => {
            let m = &run.model;
            header.dictionary_names = m.dictionary.names().map(|n| n.to_vec());
            push_dictionary(&mut blocks, &m.dictionary);
            blocks.push("second_layer", m.second_layer.clone());
            for (j, h) in m.heads.iter().enumerate() {
                header.heads.push(HeadMeta {
                    study_id: h.study_id.clone(),
                    contrast_names: h.contrast_names.clone(),
                    lambda: None,
                    input_space: None,
                    dictionary_ref: None,
                });
                blocks.push(format!("u{j}"), h.u.clone());
                blocks.push_row(format!("b{j}"), &h.b);
            }
            let mut alphas = vec![m.alpha_in];
            alphas.extend(m.heads.iter().map(|h| h.log_alpha));
            blocks.push_row("alpha_in_and_log_alphas", &Array1::from(alphas));
            if let Some(bn) = &m.bn {
                let stacked = ndarray::stack(
                    ndarray::Axis(0),
                    &[bn.running_mean.view(), bn.running_var.view(), bn.gamma.view(), bn.beta.view()],
                )
                .expect("equal lengths");
                blocks.push("batch_norm", stacked);
                blocks.push_row("batch_norm_hyper", &Array1::from(vec![bn.momentum, bn.epsilon]));
            }
            blocks.push_row("loss_trace", &Array1::from(run.loss_trace.clone()));
            header.flags.insert("samples_seen".into(), run.samples_seen.to_string());
            header.flags.insert("run_seed".into(), run.seed.to_string());
        }
        Model::Consensus(c) => {
            header.dictionary_names = c.dictionary.names().map(|n| n.to_vec());
            push_dictionary(&mut blocks, &c.dictionary);
            blocks.push("l_bar", c.l_bar.clone());
            for (j, h) in c.heads.iter().enumerate() {
                header.heads.push(HeadMeta {
                    study_id: h.study_id.clone(),
                    contrast_names: h.contrast_names.clone(),
                    lambda: None,
                    input_space: None,
                    dictionary_ref: None,
                });
                blocks.push(format!("u{j}"), h.u.clone());
                blocks.push_row(format!("b{j}"), &h.b);
            }
            blocks.push_row("ridge_and_sparsity", &Array1::from(vec![c.lambda, c.sparsity]));
        }
        Model::Dictionary(d) => {
            header.dictionary_names = d.names().map(|n| n.to_vec());
            push_dictionary(&mut blocks, d);
        }
        Model::Data(x) => blocks.push("data", x.clone()),
    }
    header.blocks = blocks.names.clone();

    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?);
    bytes.push(b'\n');
    for m in &blocks.mats {
        bytes.extend_from_slice(&encode_matrix(m.view(), Precision::F64));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_line(bytes: &[u8], what: &str) -> Result<(Vec<u8>, usize)> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Truncated(format!("checkpoint {what}")))?;
    Ok((bytes[..end].to_vec(), end + 1))
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if !bytes.starts_with(CHECKPOINT_MAGIC.as_bytes()) || bytes.get(CHECKPOINT_MAGIC.len()) != Some(&b'\n') {
        let shown: String = String::from_utf8_lossy(&bytes[..bytes.len().min(12)]).into_owned();
        return Err(Error::Version(format!("expected checkpoint magic `{CHECKPOINT_MAGIC}`, found `{shown}`")));
    }
    let mut pos = CHECKPOINT_MAGIC.len() + 1;
    let (line, used) = split_line(&bytes[pos..], "header")?;
    pos += used;
    let header: Header = serde_json::from_slice(&line).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut mats = Vec::with_capacity(header.blocks.len());
    for name in &header.blocks {
        let (m, used) = decode_matrix(&bytes[pos..]).map_err(|e| match e {
            Error::Truncated(_) => Error::Truncated(format!("checkpoint block `{name}`")),
            other => other,
        })?;
        pos += used;
        mats.push(m);
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last block", bytes.len() - pos)));
    }
    let mut blocks = Blocks {
        names: header.blocks.clone(),
        mats,
    };
    let provenance = Provenance {
        seed: header.seed,
        config_hash: header.config_hash.clone(),
    };
    let model = match header.kind.as_str() {
        "baseline" => {
            let dictionary = if blocks.names.iter().any(|n| n == "dictionary") {
                Some(take_dictionary(&mut blocks, header.dictionary_names)?)
            } else {
                None
            };
            let mut decoders = Vec::new();
            for (j, h) in header.heads.into_iter().enumerate() {
                decoders.push(LinearDecoder {
                    study_id: h.study_id,
                    weights: blocks.take(&format!("w{j}"))?,
                    bias: blocks.take_row(&format!("b{j}"))?,
                    lambda: h.lambda.ok_or_else(|| Error::Format("decoder without lambda".into()))?,
                    input_space: h.input_space.ok_or_else(|| Error::Format("decoder without input space".into()))?,
                    dictionary_ref: h.dictionary_ref,
                    contrast_names: h.contrast_names,
                });
            }
            Model::Baseline(BaselineSet { decoders, dictionary })
        }
        "multistudy" => {
            let dictionary = take_dictionary(&mut blocks, header.dictionary_names)?;
            let second = blocks.take("second_layer")?;
            let alphas = blocks.take_row("alpha_in_and_log_alphas")?;
            if alphas.len() != header.heads.len() + 1 {
                return Err(Error::Format("dropout variances do not match the heads".into()));
            }
            let mut heads = Vec::new();
            for (j, h) in header.heads.into_iter().enumerate() {
                heads.push(Head {
                    study_id: h.study_id,
                    contrast_names: h.contrast_names,
                    u: blocks.take(&format!("u{j}"))?,
                    b: blocks.take_row(&format!("b{j}"))?,
                    log_alpha: alphas[j + 1],
                });
            }
            let bn = if blocks.names.iter().any(|n| n == "batch_norm") {
                let m = blocks.take("batch_norm")?;
                let hyper = blocks.take_row("batch_norm_hyper")?;
                if m.nrows() != 4 || hyper.len() != 2 {
                    return Err(Error::Format("malformed batch-norm block".into()));
                }
                Some(BatchNormState {
                    running_mean: m.row(0).to_owned(),
                    running_var: m.row(1).to_owned(),
                    gamma: m.row(2).to_owned(),
                    beta: m.row(3).to_owned(),
                    momentum: hyper[0],
                    epsilon: hyper[1],
                })
            } else {
                None
            };
            let trace = blocks.take_row("loss_trace")?.to_vec();
            let flag = |name: &str| -> Result<u64> {
                header
                    .flags
                    .get(name)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
            };
            Model::MultiStudy(TrainedRun {
                model: MultiStudyModel::new(dictionary, second, heads, alphas[0], bn)?,
                loss_trace: trace,
                seed: flag("run_seed")?,
                samples_seen: flag("samples_seen")? as usize,
            })
        }
        "consensus" => {
            let dictionary = take_dictionary(&mut blocks, header.dictionary_names)?;
            let l_bar = blocks.take("l_bar")?;
            let mut heads = Vec::new();
            for (j, h) in header.heads.into_iter().enumerate() {
                heads.push(ConsensusHead {
                    study_id: h.study_id,
                    contrast_names: h.contrast_names,
                    u: blocks.take(&format!("u{j}"))?,
                    b: blocks.take_row(&format!("b{j}"))?,
                });
            }
            let rs = blocks.take_row("ridge_and_sparsity")?;
            Model::Consensus(ConsensusModel {
                dictionary,
                l_bar,
                heads,
                lambda: rs[0],
                sparsity: rs[1],
            })
        }
        "dictionary" => Model::Dictionary(take_dictionary(&mut blocks, header.dictionary_names)?),
        "data" => Model::Data(blocks.take("data")?),
        other => return Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
    };
    Ok(Checkpoint { provenance, model })
}
