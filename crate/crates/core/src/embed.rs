//! Opcode token embeddings (skip-gram with negative sampling) and per-block
//! mean pooling.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfg::Cfg;
use crate::codec::{Reader, Writer};
use crate::disasm::Instruction;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Mnemonic vocabulary with the unknown token at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// `tokens` must not contain duplicates or the unknown token; it is prepended.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all = vec![UNK.to_string()];
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Falls back to the unknown token.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }
}

/// Distinct mnemonics, most frequent first, ties broken lexicographically.
pub fn build_vocab<S: AsRef<[Instruction]>>(corpus: &[S]) -> Vocab {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for seq in corpus {
        for instr in seq.as_ref() {
            *counts.entry(instr.mnemonic()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
        .expect("mnemonics are distinct")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 42,
        }
    }
}

/// `|V| x D_e` token vectors, rows indexed by [`Vocab`] ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(id)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Initial vectors: uniform in `(-0.5/D, 0.5/D)`, drawn from the config seed.
pub fn init_embedding(vocab_len: usize, config: &SkipGramConfig) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim.max(1);
    let half = 0.5 / d as f64;
    let vectors = Array2::from_shape_simple_fn((vocab_len, d), || rng.random_range(-half..half));
    EmbeddingMatrix { vectors }
}

/// Trains skip-gram with negative sampling over each sequence's mnemonics.
/// Single-threaded and fully determined by `config.seed`.
pub fn train_skipgram<S: AsRef<[Instruction]>>(
    corpus: &[S],
    vocab: &Vocab,
    config: &SkipGramConfig,
) -> Result<EmbeddingMatrix> {
    if config.dim == 0 {
        return Err(Error::Config("embedding dimension must be >= 1".into()));
    }
    let init = init_embedding(vocab.len(), config);
    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|seq| seq.as_ref().iter().map(|i| vocab.id(i.mnemonic())).collect())
        .collect();
    let mut counts = vec![0usize; vocab.len()];
    for s in &sentences {
        for &t in s {
            counts[t] += 1;
        }
    }
    let distinct = counts.iter().filter(|&&c| c > 0).count();
    if config.epochs == 0 || distinct < 2 {
        return Ok(init);
    }

    // Negative sampling table: cumulative unigram^0.75.
    let mut cumulative = Vec::with_capacity(counts.len());
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }
    let total_mass = acc;

    let d = config.dim;
    let v = vocab.len();
    let mut input: Vec<f64> = init.vectors.iter().copied().collect();
    let mut output = vec![0.0; v * d];
    let mut grad = vec![0.0; d];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let words_per_epoch: usize = sentences.iter().map(Vec::len).sum();
    let total_words = (words_per_epoch * config.epochs).max(1) as f64;
    let mut processed = 0usize;
    let window = config.window.max(1);

    for _ in 0..config.epochs {
        for sentence in &sentences {
            for (pos, &center) in sentence.iter().enumerate() {
                let lr = config.lr * (1.0 - processed as f64 / total_words).max(1e-4);
                processed += 1;
                let reach = rng.random_range(1..=window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sentence.len() - 1);
                for (ctx_pos, &context) in sentence.iter().enumerate().take(hi + 1).skip(lo) {
                    if ctx_pos == pos {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let ctx_row = context * d;
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (center, 1.0)
                        } else {
                            let u = rng.random_range(0.0..total_mass);
                            let t = cumulative.partition_point(|&c| c <= u).min(v - 1);
                            if t == center {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out_row = target * d;
                        let dot: f64 = (0..d).map(|j| input[ctx_row + j] * output[out_row + j]).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for j in 0..d {
                            grad[j] += g * output[out_row + j];
                            output[out_row + j] += g * input[ctx_row + j];
                        }
                    }
                    for j in 0..d {
                        input[ctx_row + j] += grad[j];
                    }
                }
            }
        }
    }
    let vectors = Array2::from_shape_vec((v, d), input).expect("shape preserved");
    Ok(EmbeddingMatrix { vectors })
}

/// Vocabulary ids of each block's instructions.
pub fn block_token_ids(cfg: &Cfg, vocab: &Vocab) -> Vec<Vec<usize>> {
    cfg.blocks
        .iter()
        .map(|b| b.instructions.iter().map(|i| vocab.id(i.mnemonic())).collect())
        .collect()
}

/// Row `i` is the mean of block `i`'s token vectors.
pub fn embed_blocks(cfg: &Cfg, emb: &EmbeddingMatrix, vocab: &Vocab) -> Array2<f64> {
    pool_token_ids(&block_token_ids(cfg, vocab), emb)
}

pub fn pool_token_ids(ids: &[Vec<usize>], emb: &EmbeddingMatrix) -> Array2<f64> {
    let mut out = Array2::zeros((ids.len(), emb.dim()));
    for (i, block) in ids.iter().enumerate() {
        let mut row = out.row_mut(i);
        for &t in block {
            row += &emb.row(t);
        }
        if !block.is_empty() {
            row /= block.len() as f64;
        }
    }
    out
}

const EMB_MAGIC: &[u8; 8] = b"EVHEMBED";
const EMB_VERSION: u32 = 1;

/// Header `{magic, version, |V|, D_e}`, vocabulary strings, then row-major f64.
pub fn embedding_to_bytes(vocab: &Vocab, emb: &EmbeddingMatrix) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(EMB_MAGIC);
    w.u32(EMB_VERSION);
    w.u64(vocab.len() as u64);
    w.u64(emb.dim() as u64);
    for t in vocab.tokens() {
        w.str(t);
    }
    w.f64s(emb.vectors.iter().copied());
    w.buf
}

pub fn embedding_from_bytes(data: &[u8]) -> Result<(Vocab, EmbeddingMatrix)> {
    let mut r = Reader::new(data, "embedding");
    r.expect(EMB_MAGIC)?;
    let version = r.u32()?;
    if version != EMB_VERSION {
        return Err(Error::Checkpoint(format!("unsupported embedding version {version}")));
    }
    let v = r.len(4)?;
    let d = r.u64()? as usize;
    let mut tokens = Vec::with_capacity(v);
    for _ in 0..v {
        tokens.push(r.str()?);
    }
    if tokens.first().map(String::as_str) != Some(UNK) {
        return Err(Error::Checkpoint("embedding vocabulary must start with the unknown token".into()));
    }
    let vocab = Vocab::from_tokens(tokens.into_iter().skip(1))?;
    let values = r.f64s(v.checked_mul(d).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
    r.finish()?;
    let vectors = Array2::from_shape_vec((v, d), values).expect("length checked");
    Ok((vocab, EmbeddingMatrix { vectors }))
}

pub fn save_embedding(path: &Path, vocab: &Vocab, emb: &EmbeddingMatrix) -> Result<()> {
    std::fs::write(path, embedding_to_bytes(vocab, emb)).map_err(|e| Error::io(path, e))
}

pub fn load_embedding(path: &Path) -> Result<(Vocab, EmbeddingMatrix)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    embedding_from_bytes(&data)
}
