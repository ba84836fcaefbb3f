//! Minibatch training with Adam, per-epoch dev evaluation, best-model
//! checkpointing and the `key = value` configuration format.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{bucket_and_batch, EncodedPair, DEFAULT_BUCKET_SIZE, DEFAULT_MINIBATCH};
use crate::embeddings::{PretrainedTable, DEFAULT_DIM};
use crate::encoder::{EncoderMode, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalMode, TestItem};
use crate::model::DefinitionModel;
use crate::objective::{backward, sample_negative, GradientSet, LossKind};
use crate::tokenizer::{MergeTable, WordVocab, DEFAULT_NUM_MERGES, DEFAULT_VOCAB_CAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segmentation {
    Word,
    Bpe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    /// Dictionary definitions only.
    Definitions,
    /// Definitions plus crossword clues.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub bucket: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub encoder: EncoderMode,
    pub segmentation: Segmentation,
    pub dataset: Dataset,
    /// Learned gloss-embedding width.
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Width of the pretrained head vectors.
    pub pretrained_dim: usize,
    pub vocab_cap: usize,
    pub num_merges: usize,
    pub embeddings: Option<String>,
    pub train_file: Option<String>,
    pub dev_file: Option<String>,
    pub crossword_file: Option<String>,
    pub metrics_log: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            minibatch: DEFAULT_MINIBATCH,
            bucket: DEFAULT_BUCKET_SIZE,
            seed: 42,
            loss: LossKind::Cosine,
            encoder: EncoderMode::FinalState,
            segmentation: Segmentation::Word,
            dataset: Dataset::Definitions,
            embedding_dim: DEFAULT_DIM,
            hidden: DEFAULT_HIDDEN,
            pretrained_dim: DEFAULT_DIM,
            vocab_cap: DEFAULT_VOCAB_CAP,
            num_merges: DEFAULT_NUM_MERGES,
            embeddings: None,
            train_file: None,
            dev_file: None,
            crossword_file: None,
            metrics_log: None,
        }
    }
}

pub fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "cosine" => Ok(LossKind::Cosine),
        "rank" => Ok(LossKind::rank()),
        _ => Err(Error::Config(format!("unknown loss `{s}` (cosine|rank)"))),
    }
}

pub fn parse_encoder(s: &str) -> Result<EncoderMode> {
    match s {
        "final" | "final_state" => Ok(EncoderMode::FinalState),
        "average" | "state_average" => Ok(EncoderMode::StateAverage),
        "bidirectional" | "bi" => Ok(EncoderMode::Bidirectional),
        _ => Err(Error::Config(format!(
            "unknown encoder `{s}` (final|average|bidirectional)"
        ))),
    }
}

pub fn parse_segmentation(s: &str) -> Result<Segmentation> {
    match s {
        "word" => Ok(Segmentation::Word),
        "bpe" => Ok(Segmentation::Bpe),
        _ => Err(Error::Config(format!("unknown segmentation `{s}` (word|bpe)"))),
    }
}

fn encoder_name(m: EncoderMode) -> &'static str {
    match m {
        EncoderMode::FinalState => "final",
        EncoderMode::StateAverage => "average",
        EncoderMode::Bidirectional => "bidirectional",
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut margin = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                reason: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Parse {
                line: n + 1,
                reason: format!("`{key}`: {what}"),
            };
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| bad("not a number"))?
                };
            }
            match key {
                "learning_rate" => cfg.learning_rate = num!(),
                "beta1" => cfg.beta1 = num!(),
                "beta2" => cfg.beta2 = num!(),
                "epsilon" => cfg.epsilon = num!(),
                "epochs" => cfg.epochs = num!(),
                "minibatch" => cfg.minibatch = num!(),
                "bucket" => cfg.bucket = num!(),
                "seed" => cfg.seed = num!(),
                "loss" | "loss_kind" => cfg.loss = parse_loss(value)?,
                "margin" => margin = Some(num!()),
                "encoder" | "encoder_mode" => cfg.encoder = parse_encoder(value)?,
                "segmentation" => cfg.segmentation = parse_segmentation(value)?,
                "dataset" => {
                    cfg.dataset = match value {
                        "definitions" => Dataset::Definitions,
                        "full" => Dataset::Full,
                        _ => return Err(bad("expected definitions|full")),
                    }
                }
                "optimizer" => {
                    if !value.eq_ignore_ascii_case("adam") {
                        return Err(bad("only adam is supported"));
                    }
                }
                "embedding_dim" => cfg.embedding_dim = num!(),
                "hidden" => cfg.hidden = num!(),
                "pretrained_dim" => cfg.pretrained_dim = num!(),
                "vocab_cap" => cfg.vocab_cap = num!(),
                "num_merges" => cfg.num_merges = num!(),
                "embeddings" => cfg.embeddings = Some(value.to_string()),
                "train_file" => cfg.train_file = Some(value.to_string()),
                "dev_file" => cfg.dev_file = Some(value.to_string()),
                "crossword_file" => cfg.crossword_file = Some(value.to_string()),
                "metrics_log" => cfg.metrics_log = Some(value.to_string()),
                _ => return Err(bad("unknown key")),
            }
        }
        if let (Some(m), LossKind::Rank { .. }) = (margin, cfg.loss) {
            cfg.loss = LossKind::Rank { margin: m };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    /// Renders the configuration in the format [`TrainConfig::parse`] reads.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let (loss, margin) = match self.loss {
            LossKind::Cosine => ("cosine", None),
            LossKind::Rank { margin } => ("rank", Some(margin)),
        };
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "optimizer = adam");
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "minibatch = {}", self.minibatch);
        let _ = writeln!(s, "bucket = {}", self.bucket);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss = {loss}");
        if let Some(m) = margin {
            let _ = writeln!(s, "margin = {m}");
        }
        let _ = writeln!(s, "encoder = {}", encoder_name(self.encoder));
        let _ = writeln!(
            s,
            "segmentation = {}",
            match self.segmentation {
                Segmentation::Word => "word",
                Segmentation::Bpe => "bpe",
            }
        );
        let _ = writeln!(
            s,
            "dataset = {}",
            match self.dataset {
                Dataset::Definitions => "definitions",
                Dataset::Full => "full",
            }
        );
        let _ = writeln!(s, "embedding_dim = {}", self.embedding_dim);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "pretrained_dim = {}", self.pretrained_dim);
        let _ = writeln!(s, "vocab_cap = {}", self.vocab_cap);
        let _ = writeln!(s, "num_merges = {}", self.num_merges);
        for (key, value) in [
            ("embeddings", &self.embeddings),
            ("train_file", &self.train_file),
            ("dev_file", &self.dev_file),
            ("crossword_file", &self.crossword_file),
            ("metrics_log", &self.metrics_log),
        ] {
            if let Some(v) = value {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        for (name, v) in [
            ("minibatch", self.minibatch),
            ("bucket", self.bucket),
            ("embedding_dim", self.embedding_dim),
            ("hidden", self.hidden),
            ("pretrained_dim", self.pretrained_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.bucket % self.minibatch != 0 {
            return Err(Error::Config(format!(
                "minibatch {} does not divide bucket {}",
                self.minibatch, self.bucket
            )));
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    m_embed: Array2<f64>,
    v_embed: Array2<f64>,
}

impl AdamState {
    pub fn new(model: &DefinitionModel) -> Self {
        let sizes: Vec<usize> = model.dense_tensors().iter().map(|t| t.len()).collect();
        let shape = model.embeddings.weights.dim();
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            m_embed: Array2::zeros(shape),
            v_embed: Array2::zeros(shape),
        }
    }
}

/// One Adam step over a flat tensor with bias-correction factors for step `t`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Applies one Adam update. Encoder and projection tensors are updated
/// densely; embedding rows only when they received a gradient in this step,
/// and the PAD row never.
pub fn adam_update(model: &mut DefinitionModel, grads: &GradientSet, state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t;
    let dense_grads = grads.dense_tensors();
    for (k, params) in model.dense_tensors_mut().into_iter().enumerate() {
        adam_step(params, dense_grads[k], &mut state.m[k], &mut state.v[k], t, cfg);
    }
    let pad = model.pad_id();
    for (&id, g) in &grads.embeddings {
        if id == pad {
            continue;
        }
        let row = id as usize;
        let mut p = model.embeddings.weights.row_mut(row);
        let mut m = state.m_embed.row_mut(row);
        let mut v = state.v_embed.row_mut(row);
        adam_step(
            p.as_slice_mut().expect("row is contiguous"),
            g.as_slice().expect("contiguous"),
            m.as_slice_mut().expect("row is contiguous"),
            v.as_slice_mut().expect("row is contiguous"),
            t,
            cfg,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: DefinitionModel,
    pub epoch: usize,
    pub dev_median_rank: f64,
    pub vocab: Option<WordVocab>,
    pub merges: Option<MergeTable>,
}

const MAGIC: &[u8; 8] = b"GLSRANK1";

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    bincode::serialize_into(&mut w, ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let ckpt: Checkpoint =
        bincode::deserialize_from(&mut r).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(ckpt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_median_rank: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub curve: Vec<EpochMetrics>,
}

/// Writes `epoch<TAB>median_rank` lines.
pub fn write_metrics_log(mut w: impl Write, curve: &[EpochMetrics]) -> std::io::Result<()> {
    for e in curve {
        writeln!(w, "{}\t{}", e.epoch, e.dev_median_rank)?;
    }
    Ok(())
}

/// Dev items ranked against the whole table.
pub fn dev_items(pairs: &[EncodedPair], table: &PretrainedTable) -> Vec<TestItem> {
    pairs
        .iter()
        .enumerate()
        .map(|(id, p)| TestItem {
            id,
            gloss: p.gloss.clone(),
            answer: table.word(p.head).to_string(),
        })
        .collect()
}

const NEGATIVE_STREAM: u64 = 0x6e65_6761_7469_7665;
const ORDER_STREAM: u64 = 0x6f72_6465_7200_0000;

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64)
}

/// Trains `model` for `config.epochs` epochs and returns the checkpoint with
/// the lowest dev median rank (the earliest one on ties). With zero epochs
/// the initial model is returned.
pub fn train(
    config: &TrainConfig,
    mut model: DefinitionModel,
    train_set: &[EncodedPair],
    dev_set: &[EncodedPair],
    table: &PretrainedTable,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("train and dev sets must be nonempty".into()));
    }
    if model.output_dim() != table.dim() {
        return Err(Error::Shape(format!(
            "model outputs {} dims, pretrained table has {}",
            model.output_dim(),
            table.dim()
        )));
    }
    if config.loss.needs_negatives() && table.len() < 2 {
        return Err(Error::Config("rank loss needs at least two head words".into()));
    }
    let dev = dev_items(dev_set, table);
    let adam = config.adam();
    let mut state = AdamState::new(&model);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(config.seed ^ NEGATIVE_STREAM);
    let pad = model.pad_id();

    let mut best = Checkpoint {
        config: config.clone(),
        model: model.clone(),
        epoch: 0,
        dev_median_rank: f64::INFINITY,
        vocab: None,
        merges: None,
    };
    if config.epochs == 0 {
        best.dev_median_rank = evaluate(&model, table, &dev, EvalMode::Definitions)?
            .report
            .median_rank;
    }

    let mut curve = Vec::with_capacity(config.epochs);
    let mut global_batch = 0;
    for epoch in 1..=config.epochs {
        let seed = epoch_seed(config.seed, epoch);
        let mut batches = bucket_and_batch(train_set, config.bucket, config.minibatch, seed, pad)?;
        batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ ORDER_STREAM));
        let mut loss_sum = 0.0;
        for batch in &batches {
            let negatives: Vec<usize> = if config.loss.needs_negatives() {
                batch
                    .head_ids
                    .iter()
                    .map(|&h| sample_negative(table.len(), h, &mut neg_rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let (loss, grads) = backward(&model, batch, &negatives, table, config.loss).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                    batch: global_batch,
                },
                other => other,
            })?;
            adam_update(&mut model, &grads, &mut state, &adam);
            loss_sum += loss;
            global_batch += 1;
        }
        let median = evaluate(&model, table, &dev, EvalMode::Definitions)?
            .report
            .median_rank;
        let mean_loss = loss_sum / batches.len() as f64;
        info!("epoch {epoch}: loss {mean_loss:.6}, dev median rank {median}");
        curve.push(EpochMetrics {
            epoch,
            mean_loss,
            dev_median_rank: median,
        });
        if median < best.dev_median_rank {
            best.model = model.clone();
            best.epoch = epoch;
            best.dev_median_rank = median;
        }
    }
    Ok(TrainOutcome { best, curve })
}
