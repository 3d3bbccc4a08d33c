use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avp::{score_nodes, NodeChain, PatternTable, ScoreConfig, VulnClass};
use crate::cfg::build_cfg;
use crate::codec::{Reader, Writer};
use crate::disasm::ContractBytecode;
use crate::distill::{LossConfig, NeuronParams};
use crate::embed::{block_token_ids, pool_token_ids, EmbeddingMatrix, SkipGramConfig, Vocab, UNK};
use crate::params::{sigmoid, Activation, ParamSet};
use crate::student::{gfeor_forward, iseor_forward, mlp_forward, GfeorParams, IseorParams, StudentConfig};
use crate::{Error, Result};

use super::dataset::SampleRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    /// Softmax cross-entropy against the neuron-distilled teacher feature.
    #[default]
    Neuron,
    /// Raw mean squared error against the same distilled feature.
    FeatureMse,
    /// No teacher term and no neuron parameters.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub vuln_class: VulnClass,
    pub stage_a_epochs: usize,
    pub stage_a_lr: f64,
    pub stage_b_epochs: usize,
    pub stage_b_lr: f64,
    pub batch_size: usize,
    /// Decision threshold on the predicted probability.
    pub threshold: f64,
    /// Leave the sequence extractor at its initialization.
    pub skip_stage_a: bool,
    /// Also update the sequence extractor during stage B.
    pub joint: bool,
    /// Update token embeddings during stage A.
    pub finetune_embeddings: bool,
    pub distill: DistillMode,
    pub neurons: usize,
    pub activation: Activation,
    pub loss: LossConfig,
    pub score: ScoreConfig,
    pub student: StudentConfig,
    /// `skipgram.seed` is ignored; the embedding seed derives from `seed`.
    pub skipgram: SkipGramConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            vuln_class: VulnClass::Reentrancy,
            stage_a_epochs: 60,
            stage_a_lr: 0.05,
            stage_b_epochs: 15,
            stage_b_lr: 0.1,
            batch_size: 2,
            threshold: 0.5,
            skip_stage_a: false,
            joint: false,
            finetune_embeddings: false,
            distill: DistillMode::Neuron,
            neurons: 3,
            activation: Activation::Tanh,
            loss: LossConfig::default(),
            score: ScoreConfig::default(),
            student: StudentConfig::default(),
            skipgram: SkipGramConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.score.validate()?;
        self.student.validate()?;
        if self.student.feature_dim != self.score.feature_dim {
            return Err(Error::Config(format!(
                "student.feature_dim ({}) must equal score.feature_dim ({})",
                self.student.feature_dim, self.score.feature_dim
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if self.stage_b_epochs == 0 || (self.stage_a_epochs == 0 && !self.skip_stage_a) {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("stage_a_lr", self.stage_a_lr), ("stage_b_lr", self.stage_b_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.distill != DistillMode::None && self.neurons == 0 {
            return Err(Error::Config("neurons must be >= 1".into()));
        }
        if self.skipgram.dim == 0 {
            return Err(Error::Config("skipgram.dim must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Independent random streams so switching one component on or off never
/// shifts another's draws.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Embedding = 1,
    Iseor = 2,
    Gfeor = 3,
    Neurons = 4,
    StageA = 5,
    StageB = 6,
}

pub(crate) fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub table: PatternTable,
    pub vocab: Vocab,
    pub embedding: EmbeddingMatrix,
    pub iseor: IseorParams,
    pub gfeor: GfeorParams,
    pub neurons: Option<NeuronParams>,
}

/// Per-contract inputs that do not change during training.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub label: bool,
    pub teacher: Option<Array1<f64>>,
    pub token_ids: Vec<Vec<usize>>,
    pub edges: BTreeSet<(usize, usize)>,
    pub targets: Array2<f64>,
    pub matched: Vec<bool>,
}

impl Prepared {
    pub fn nodes(&self) -> usize {
        self.token_ids.len()
    }
}

pub(crate) fn prepare(
    sample: &SampleRecord,
    table: &PatternTable,
    vocab: &Vocab,
    score: &ScoreConfig,
) -> (Prepared, Vec<NodeChain>) {
    let cfg = build_cfg(&sample.bytecode);
    let scores = score_nodes(&cfg, table, score);
    (
        Prepared {
            label: sample.label,
            teacher: sample.teacher.clone(),
            token_ids: block_token_ids(&cfg, vocab),
            edges: cfg.edges.clone(),
            targets: scores.features,
            matched: scores.matched,
        },
        scores.matched_chains,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub y: f64,
    pub label: bool,
    pub matched_chains: Vec<NodeChain>,
}

/// Per-node features of one contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractFeatures {
    pub sequence: Array2<f64>,
    pub scores: Vec<f64>,
    pub graph: Array1<f64>,
    pub y: f64,
}

impl Model {
    pub fn vuln_class(&self) -> VulnClass {
        self.table.vuln_class
    }

    pub(crate) fn prepare(&self, sample: &SampleRecord) -> (Prepared, Vec<NodeChain>) {
        prepare(sample, &self.table, &self.vocab, &self.config.score)
    }

    /// Sequence features, graph feature and probability for a non-empty graph.
    pub(crate) fn forward(&self, p: &Prepared) -> Result<(Array2<f64>, Array1<f64>, f64)> {
        let emb = pool_token_ids(&p.token_ids, &self.embedding);
        let (h_s, _) = iseor_forward(&self.iseor, &emb);
        let (h_g, _) = gfeor_forward(&self.gfeor.gat, &h_s, &p.edges)?;
        let (logit, _) = mlp_forward(&self.gfeor.mlp, &h_g);
        Ok((h_s, h_g, sigmoid(logit)))
    }

    pub fn features(&self, sample: &SampleRecord) -> Result<ContractFeatures> {
        let (p, _) = self.prepare(sample);
        let (sequence, graph, y) = self.forward(&p)?;
        let scores = p
            .matched
            .iter()
            .map(|&m| if m { self.config.score.xi } else { self.config.score.nu })
            .collect();
        Ok(ContractFeatures {
            sequence,
            scores,
            graph,
            y,
        })
    }

    pub fn predict_contract(&self, code: &ContractBytecode) -> Result<Prediction> {
        if code.is_empty() {
            return Err(Error::EmptyGraph(format!(
                "contract `{}` has no bytecode to analyse",
                code.id
            )));
        }
        let sample = SampleRecord {
            id: code.id.clone(),
            bytecode: code.clone(),
            label: false,
            vuln_class: self.vuln_class(),
            teacher: None,
        };
        let (p, matched_chains) = self.prepare(&sample);
        let (_, _, y) = self.forward(&p)?;
        Ok(Prediction {
            y,
            label: y >= self.config.threshold,
            matched_chains,
        })
    }

    /// Probability for a labeled sample; empty contracts score 0.
    pub fn score_sample(&self, sample: &SampleRecord) -> Result<f64> {
        if sample.bytecode.is_empty() {
            return Ok(0.0);
        }
        let (p, _) = self.prepare(sample);
        Ok(self.forward(&p)?.2)
    }

    /// Freshly initialized parameters for `config` over `vocab`.
    pub(crate) fn init(
        config: &TrainConfig,
        table: PatternTable,
        vocab: Vocab,
        embedding: EmbeddingMatrix,
        teacher_dim: Option<usize>,
    ) -> Result<Self> {
        let iseor = IseorParams::init(&mut stream_rng(config.seed, Stream::Iseor), embedding.dim(), &config.student);
        let gfeor = GfeorParams::init(&mut stream_rng(config.seed, Stream::Gfeor), &config.student);
        let neurons = match (config.distill, teacher_dim) {
            (DistillMode::None, _) | (_, None) => None,
            (_, Some(d)) => Some(NeuronParams::init(
                &mut stream_rng(config.seed, Stream::Neurons),
                config.neurons,
                config.student.graph_dim(),
                d,
                config.activation,
            )?),
        };
        Ok(Self {
            config: config.clone(),
            table,
            vocab,
            embedding,
            iseor,
            gfeor,
            neurons,
        })
    }
}

const MODEL_MAGIC: &[u8; 8] = b"EVHMODEL";
const MODEL_VERSION: u32 = 1;

fn named_tensors(model: &Model) -> Vec<(String, ArrayD<f64>)> {
    let mut out = vec![("embedding".to_string(), model.embedding.vectors.clone().into_dyn())];
    out.extend(model.iseor.to_named());
    out.extend(model.gfeor.to_named());
    if let Some(n) = &model.neurons {
        out.extend(n.to_named());
    }
    out
}

/// `{magic, version, config JSON, pattern table JSON, vocabulary, teacher
/// dim, tensors}` where each tensor is `name, rank, dims, row-major f64`.
pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.str(&serde_json::to_string(&model.config).expect("config serializes"));
    w.str(&serde_json::to_string(&model.table).expect("table serializes"));
    w.u64(model.vocab.len() as u64 - 1);
    for t in &model.vocab.tokens()[1..] {
        w.str(t);
    }
    w.u64(model.neurons.as_ref().map_or(0, |n| n.source_dim()) as u64);
    let tensors = named_tensors(model);
    w.u64(tensors.len() as u64);
    for (name, t) in tensors {
        w.str(&name);
        w.u64(t.ndim() as u64);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.iter().copied());
    }
    w.buf
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn model_from_bytes(data: &[u8]) -> Result<Model> {
    let mut r = Reader::new(data, "model checkpoint");
    r.expect(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(ckpt_err(format!("unsupported checkpoint version {version}")));
    }
    let config: TrainConfig = serde_json::from_str(&r.str()?).map_err(|e| ckpt_err(format!("config: {e}")))?;
    config.validate()?;
    let table: PatternTable = serde_json::from_str(&r.str()?).map_err(|e| ckpt_err(format!("pattern table: {e}")))?;
    table.validate()?;
    let n_tokens = r.len(4)?;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(r.str()?);
    }
    if tokens.iter().any(|t| t == UNK) {
        return Err(ckpt_err("vocabulary repeats the unknown token"));
    }
    let vocab = Vocab::from_tokens(tokens)?;
    let teacher_dim = match r.u64()? as usize {
        0 => None,
        d => Some(d),
    };

    // A template with the shapes implied by the config; every tensor must be
    // supplied with exactly that shape.
    let template_emb = EmbeddingMatrix {
        vectors: Array2::zeros((vocab.len(), config.skipgram.dim)),
    };
    let mut model = Model::init(&config, table, vocab, template_emb, teacher_dim)?;

    let count = r.len(8)?;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.len(8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let size = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ckpt_err("tensor size overflow"))?;
        let values = r.f64s(size)?;
        let t = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length checked");
        loaded.push((name, t));
    }
    r.finish()?;

    let expected = named_tensors(&model);
    if expected.len() != loaded.len() {
        return Err(ckpt_err(format!(
            "expected {} tensors, found {}",
            expected.len(),
            loaded.len()
        )));
    }
    for ((want_name, want), (name, got)) in expected.iter().zip(&loaded) {
        if want_name != name || want.shape() != got.shape() {
            return Err(ckpt_err(format!(
                "tensor `{name}` {:?} does not match `{want_name}` {:?} required by the config",
                got.shape(),
                want.shape()
            )));
        }
    }
    let mut it = loaded.into_iter().map(|(_, t)| t);
    model.embedding.vectors = it.next().expect("embedding").into_dimensionality().expect("shape checked");
    fill(&mut model.iseor, &mut it);
    fill(&mut model.gfeor, &mut it);
    if let Some(n) = model.neurons.as_mut() {
        fill(n, &mut it);
    }
    Ok(model)
}

fn fill<P: ParamSet>(p: &mut P, values: &mut impl Iterator<Item = ArrayD<f64>>) {
    for (_, mut t) in p.tensors_mut() {
        t.assign(&values.next().expect("count checked"));
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&data)
}
