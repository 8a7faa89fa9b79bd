//! Disease-ranking model: `softmax(FNN([e, onehot(p)]))`.
//!
//! The observation is always fed as a 3M one-hot vector (unknown, confirmed,
//! denied per element), whether it is a complete training record or the
//! partial state of a running consultation.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nncore::{self, AdamConfig, AdamState, DenseNet, NetCheckpoint, OutputHead};
use crate::ontology::{HpiOntology, Level, Status};
use crate::patientgen::{encode_history, HistoryEncoding, PatientDataset};
use crate::seed;

/// One-hot encode a ternary observation: code `c` of element `i` sets slot `3i + c`.
pub fn encode_hpi_ternary(obs: &[u8]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; 3 * obs.len()];
    for (i, &c) in obs.iter().enumerate() {
        if c > 2 {
            return Err(Error::Domain(format!("element {i} has ternary value {c}")));
        }
        out[3 * i + c as usize] = 1.0;
    }
    Ok(out)
}

/// Same layout as [`encode_hpi_ternary`], from statuses.
pub fn encode_status(status: &[Status]) -> Vec<f64> {
    let mut out = vec![0.0; 3 * status.len()];
    for (i, s) in status.iter().enumerate() {
        out[3 * i + s.ternary() as usize] = 1.0;
    }
    out
}

/// Disease indices by descending probability, ties by ascending index.
pub fn rank_from_probs(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisModel {
    net: DenseNet,
    history: HistoryEncoding,
    m: usize,
    disease_names: Vec<String>,
    ontology_digest: String,
}

impl DiagnosisModel {
    pub fn new(
        ontology: &HpiOntology,
        history: HistoryEncoding,
        disease_names: Vec<String>,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if disease_names.is_empty() {
            return Err(Error::Config("diagnosis model needs at least one disease".into()));
        }
        let mut dims = vec![history.width + 3 * ontology.m()];
        dims.extend_from_slice(hidden);
        dims.push(disease_names.len());
        Ok(DiagnosisModel {
            net: DenseNet::new(&dims, OutputHead::Logits, seed)?,
            history,
            m: ontology.m(),
            disease_names,
            ontology_digest: ontology.digest().to_string(),
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn history(&self) -> &HistoryEncoding {
        &self.history
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_diseases(&self) -> usize {
        self.disease_names.len()
    }

    pub fn disease_names(&self) -> &[String] {
        &self.disease_names
    }

    pub fn ontology_digest(&self) -> &str {
        &self.ontology_digest
    }

    pub fn check_ontology(&self, ontology: &HpiOntology) -> Result<()> {
        if self.ontology_digest != ontology.digest() {
            return Err(Error::digest(ontology.digest(), &self.ontology_digest));
        }
        Ok(())
    }

    pub fn check_dataset(&self, dataset: &PatientDataset) -> Result<()> {
        if self.ontology_digest != dataset.ontology_digest {
            return Err(Error::digest(&self.ontology_digest, &dataset.ontology_digest));
        }
        if dataset.disease_names != self.disease_names {
            return Err(Error::Shape(
                "dataset disease vocabulary differs from the model's".into(),
            ));
        }
        Ok(())
    }

    /// Network input `[e, onehot(obs)]`.
    pub fn input(&self, e: &[f64], obs: &[u8]) -> Result<Vec<f64>> {
        crate::error::shape_check("history vector", self.history.width, e.len())?;
        crate::error::shape_check("observation", self.m, obs.len())?;
        let mut x = e.to_vec();
        x.extend(encode_hpi_ternary(obs)?);
        Ok(x)
    }

    pub fn predict(&self, e: &[f64], obs: &[u8]) -> Result<Vec<f64>> {
        let logits = self.net.forward(&self.input(e, obs)?)?;
        nncore::softmax(&logits)
    }

    pub fn rank_diseases(&self, e: &[f64], obs: &[u8]) -> Result<Vec<usize>> {
        Ok(rank_from_probs(&self.predict(e, obs)?))
    }

    /// Mean cross-entropy and top-1 accuracy on complete records.
    pub fn evaluate(&self, dataset: &PatientDataset) -> Result<EpochMetrics> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("nothing to evaluate".into()));
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for chunk in dataset.records.chunks(512) {
            let mut x = Array2::zeros((chunk.len(), self.net.input_dim()));
            for (row, r) in chunk.iter().enumerate() {
                let e = encode_history(r, &self.history)?;
                let input = self.input(&e, &r.hpi)?;
                x.row_mut(row).assign(&ndarray::ArrayView1::from(&input));
            }
            let logits = self.net.forward_batch(x.view())?;
            for (row, r) in chunk.iter().enumerate() {
                let probs = nncore::softmax(logits.row(row).as_slice().expect("row"))?;
                loss += nncore::cross_entropy(r.label, &probs)?;
                if rank_from_probs(&probs)[0] == r.label {
                    correct += 1;
                }
            }
        }
        Ok(EpochMetrics {
            mean_loss: loss / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        })
    }

    pub fn to_checkpoint(&self, seed: u64) -> NetCheckpoint {
        let mut meta = Map::new();
        meta.insert("seed".into(), Value::from(seed));
        meta.insert("E".into(), Value::from(self.history.width));
        meta.insert("M".into(), Value::from(self.m));
        meta.insert("D".into(), Value::from(self.n_diseases()));
        meta.insert("ontology_digest".into(), Value::from(self.ontology_digest.clone()));
        meta.insert("disease_names".into(), Value::from(self.disease_names.clone()));
        meta.insert("age_min".into(), Value::from(self.history.age_min));
        meta.insert("age_max".into(), Value::from(self.history.age_max));
        self.net.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<Self> {
        let net = DenseNet::from_checkpoint(ckpt)?;
        let meta = &ckpt.meta;
        let e = meta_usize(meta, "E")?;
        let m = meta_usize(meta, "M")?;
        let d = meta_usize(meta, "D")?;
        let disease_names: Vec<String> = serde_json::from_value(
            meta.get("disease_names").cloned().unwrap_or(Value::Null),
        )
        .map_err(|err| Error::Parse(format!("checkpoint disease_names: {err}")))?;
        let ontology_digest = meta_str(meta, "ontology_digest")?;
        if net.input_dim() != e + 3 * m || net.output_dim() != d || disease_names.len() != d {
            return Err(Error::Shape(
                "diagnosis checkpoint dims disagree with its meta block".into(),
            ));
        }
        let history = HistoryEncoding {
            width: e,
            age_min: meta.get("age_min").and_then(Value::as_f64).unwrap_or(0.0),
            age_max: meta.get("age_max").and_then(Value::as_f64).unwrap_or(100.0),
        };
        Ok(DiagnosisModel {
            net,
            history,
            m,
            disease_names,
            ontology_digest,
        })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.to_checkpoint(seed).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&NetCheckpoint::load(path)?)
    }
}

pub(crate) fn meta_usize(meta: &Map<String, Value>, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Parse(format!("checkpoint meta lacks integer {key:?}")))
}

pub(crate) fn meta_str(meta: &Map<String, Value>, key: &str) -> Result<String> {
    meta.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Parse(format!("checkpoint meta lacks string {key:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Per-sample hide-rate range; `None` trains on complete records.
    pub masking: Option<(f64, f64)>,
}

impl Default for SlTrainConfig {
    fn default() -> Self {
        SlTrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            masking: Some((0.0, 0.8)),
        }
    }
}

impl SlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if let Some((lo, hi)) = self.masking {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!(
                    "masking range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Hide known entries of `obs` at a rate drawn from `range`. A hidden
/// confirmed first-level element takes its confirmed children with it, so
/// the result still looks like a consultation state.
pub fn mask_observation(
    obs: &mut [u8],
    ontology_levels: &[(Level, Option<usize>)],
    range: (f64, f64),
    rng: &mut impl Rng,
) {
    let rate = if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    };
    let mut hidden = vec![false; obs.len()];
    for (e, (level, _)) in ontology_levels.iter().enumerate() {
        if *level == Level::First && obs[e] != 0 && rng.random::<f64>() < rate {
            hidden[e] = true;
        }
    }
    for (e, (level, parent)) in ontology_levels.iter().enumerate() {
        if *level != Level::Second || obs[e] == 0 {
            continue;
        }
        let p = parent.expect("second-level element has a parent");
        if (hidden[p] && obs[e] == 1) || rng.random::<f64>() < rate {
            hidden[e] = true;
        }
    }
    for (slot, h) in obs.iter_mut().zip(hidden) {
        if h {
            *slot = 0;
        }
    }
}

/// Minibatch Adam on mean cross-entropy.
pub struct SlTrainer {
    cfg: SlTrainConfig,
    adam: AdamState,
    epoch: usize,
    levels: Vec<(Level, Option<usize>)>,
}

impl SlTrainer {
    pub fn new(cfg: SlTrainConfig, model: &DiagnosisModel, ontology: &HpiOntology) -> Result<Self> {
        cfg.validate()?;
        model.check_ontology(ontology)?;
        let adam = AdamState::new(
            &model.net,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        Ok(SlTrainer {
            cfg,
            adam,
            epoch: 0,
            levels: ontology.elements().iter().map(|e| (e.level, e.parent)).collect(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One shuffled pass over `dataset`. Loss and accuracy are measured on
    /// the (possibly masked) minibatches before each update.
    pub fn train_epoch(
        &mut self,
        model: &mut DiagnosisModel,
        dataset: &PatientDataset,
    ) -> Result<EpochMetrics> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("training set is empty".into()));
        }
        model.check_dataset(dataset)?;
        let mut rng = seed::stream(seed::mix(self.cfg.seed, self.epoch as u64), 4);
        self.epoch += 1;

        let histories = dataset
            .records
            .iter()
            .map(|r| encode_history(r, &model.history))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        let width = model.net.input_dim();
        let d = model.n_diseases();
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut x = Array2::zeros((batch.len(), width));
            for (row, &i) in batch.iter().enumerate() {
                let record = &dataset.records[i];
                let mut obs = record.hpi.clone();
                if let Some(range) = self.cfg.masking {
                    mask_observation(&mut obs, &self.levels, range, &mut rng);
                }
                let input = model.input(&histories[i], &obs)?;
                x.row_mut(row).assign(&ndarray::ArrayView1::from(&input));
            }
            let (logits, cache) = model.net.forward_train(x)?;
            let mut grad = Array2::zeros((batch.len(), d));
            let scale = 1.0 / batch.len() as f64;
            for (row, &i) in batch.iter().enumerate() {
                let label = dataset.records[i].label;
                let probs = nncore::softmax(logits.row(row).as_slice().expect("row"))?;
                total_loss += nncore::cross_entropy(label, &probs)?;
                if rank_from_probs(&probs)[0] == label {
                    correct += 1;
                }
                for (j, p) in probs.iter().enumerate() {
                    let target = if j == label { 1.0 } else { 0.0 };
                    grad[(row, j)] = (p - target) * scale;
                }
            }
            let grads = model.net.backward(&cache, grad.view())?;
            self.adam.step(&mut model.net, &grads)?;
        }
        Ok(EpochMetrics {
            mean_loss: total_loss / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        })
    }

    /// Run the configured number of epochs; returns per-epoch metrics.
    pub fn fit(
        &mut self,
        model: &mut DiagnosisModel,
        dataset: &PatientDataset,
    ) -> Result<Vec<EpochMetrics>> {
        (0..self.cfg.epochs)
            .map(|_| self.train_epoch(model, dataset))
            .collect()
    }
}
