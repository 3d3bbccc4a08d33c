//! Two-stage training.
//!
//! Stage A fits the sequence extractor to the node-score targets with the
//! noise loss. Stage B fits the graph extractor, the prediction head and the
//! distillation neurons with `α · L_msl + β · L_pre`. Both stages use plain
//! minibatch SGD with per-batch averaged gradients.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avp::PatternTable;
use crate::disasm::{disassemble, InstructionSeq};
use crate::distill::{bce_with_logit, feature_mse_grad, msl_loss_grad, nd_backward, nd_forward, NeuronParams};
use crate::embed::{build_vocab, pool_token_ids, train_skipgram, SkipGramConfig};
use crate::params::ParamSet;
use crate::student::{
    gfeor_backward, gfeor_forward, iseor_backward, iseor_forward, mlp_backward, mlp_forward, noise_loss_grad,
    GatParams, IseorCache, IseorParams, MlpParams,
};
use crate::{Error, Result};

use super::dataset::SampleRecord;
use super::model::{prepare, stream_rng, DistillMode, Model, Prepared, Stream, TrainConfig};

/// Mean loss per epoch for each stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage_a: Vec<f64>,
    pub stage_b: Vec<f64>,
    /// Contracts left out of training because their graph is empty.
    pub skipped: Vec<String>,
}

pub fn train(dataset: &[SampleRecord], config: &TrainConfig) -> Result<(Model, TrainLog)> {
    train_with_table(dataset, config, PatternTable::default_for(config.vuln_class))
}

pub fn train_with_table(
    dataset: &[SampleRecord],
    config: &TrainConfig,
    table: PatternTable,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    table.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if !(dataset.iter().any(|s| s.label) && dataset.iter().any(|s| !s.label)) {
        return Err(Error::Dataset("training needs both positive and negative samples".into()));
    }
    let teacher_dim = teacher_dim(dataset)?;

    let corpus: Vec<InstructionSeq> = dataset.iter().map(|s| disassemble(&s.bytecode)).collect();
    let vocab = build_vocab(&corpus);
    let sg = SkipGramConfig {
        seed: stream_rng(config.seed, Stream::Embedding).next_u64(),
        ..config.skipgram
    };
    let mut embedding = train_skipgram(&corpus, &vocab, &sg)?;
    // Skip-gram vectors come out small; bring them to unit RMS.
    let rms = (embedding.vectors.iter().map(|v| v * v).sum::<f64>() / embedding.vectors.len().max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        embedding.vectors /= rms;
    }
    let mut model = Model::init(config, table, vocab, embedding, teacher_dim)?;

    let mut log = TrainLog::default();
    let mut prepared = Vec::with_capacity(dataset.len());
    for s in dataset {
        let (p, _) = prepare(s, &model.table, &model.vocab, &config.score);
        if p.nodes() == 0 {
            log::warn!("skipping `{}`: empty control-flow graph", s.id);
            log.skipped.push(s.id.clone());
        } else {
            prepared.push(p);
        }
    }
    if prepared.is_empty() {
        return Err(Error::Dataset("no contract has a non-empty graph".into()));
    }

    if !config.skip_stage_a {
        let mut rng = stream_rng(config.seed, Stream::StageA);
        for epoch in 0..config.stage_a_epochs {
            let loss = stage_a_epoch(&mut model, &prepared, &mut rng)?;
            log::info!("stage A epoch {}: noise loss {loss:.6}", epoch + 1);
            log.stage_a.push(loss);
        }
    }

    let mut rng = stream_rng(config.seed, Stream::StageB);
    for epoch in 0..config.stage_b_epochs {
        let loss = stage_b_epoch(&mut model, &prepared, &mut rng)?;
        log::info!("stage B epoch {}: multi-knowledge loss {loss:.6}", epoch + 1);
        log.stage_b.push(loss);
    }
    if !(model.iseor.is_finite() && model.gfeor.is_finite()) {
        return Err(Error::Dataset("training diverged (non-finite parameters); lower the learning rate".into()));
    }
    Ok((model, log))
}

fn teacher_dim(dataset: &[SampleRecord]) -> Result<Option<usize>> {
    let mut dim = None;
    for s in dataset {
        if let Some(t) = &s.teacher {
            match dim {
                None => dim = Some(t.len()),
                Some(d) if d != t.len() => {
                    return Err(Error::Dataset(format!(
                        "teacher feature of `{}` has dim {}, expected {d}",
                        s.id,
                        t.len()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(dim.filter(|&d| d > 0))
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn scatter_embedding_grad(grad: &mut Array2<f64>, token_ids: &[Vec<usize>], d_emb: &Array2<f64>) {
    for (i, block) in token_ids.iter().enumerate() {
        if block.is_empty() {
            continue;
        }
        let share = d_emb.row(i).to_owned() / block.len() as f64;
        for &t in block {
            let mut row = grad.row_mut(t);
            row += &share;
        }
    }
}

fn stage_a_epoch(model: &mut Model, data: &[Prepared], rng: &mut ChaCha8Rng) -> Result<f64> {
    let lr = model.config.stage_a_lr;
    let finetune = model.config.finetune_embeddings;
    let mut total = 0.0;
    for batch in batches(data.len(), model.config.batch_size, rng) {
        let mut grad = model.iseor.zeros_like();
        let mut emb_grad = finetune.then(|| Array2::zeros(model.embedding.vectors.raw_dim()));
        for &i in &batch {
            let p = &data[i];
            let emb = pool_token_ids(&p.token_ids, &model.embedding);
            let (h_s, cache) = iseor_forward(&model.iseor, &emb);
            let (loss, d_hs) = noise_loss_grad(&p.targets, &h_s)?;
            total += loss;
            let (g, d_emb) = iseor_backward(&model.iseor, &cache, &d_hs);
            grad.axpy(1.0, &g);
            if let Some(eg) = emb_grad.as_mut() {
                scatter_embedding_grad(eg, &p.token_ids, &d_emb);
            }
        }
        let step = -lr / batch.len() as f64;
        model.iseor.axpy(step, &grad);
        if let Some(eg) = emb_grad {
            model.embedding.vectors.scaled_add(step, &eg);
        }
    }
    Ok(total / data.len() as f64)
}

struct StageBGrads {
    gat: GatParams,
    mlp: MlpParams,
    neurons: Option<NeuronParams>,
    iseor: Option<IseorParams>,
}

fn stage_b_epoch(model: &mut Model, data: &[Prepared], rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = model.config.clone();
    let (alpha, beta) = (cfg.loss.alpha, cfg.loss.beta);

    // With a frozen extractor its outputs are fixed for the whole epoch.
    let frozen: Option<Vec<Array2<f64>>> = (!cfg.joint).then(|| {
        data.iter()
            .map(|p| iseor_forward(&model.iseor, &pool_token_ids(&p.token_ids, &model.embedding)).0)
            .collect()
    });

    let mut total = 0.0;
    for batch in batches(data.len(), cfg.batch_size, rng) {
        let mut grads = StageBGrads {
            gat: model.gfeor.gat.zeros_like(),
            mlp: model.gfeor.mlp.zeros_like(),
            neurons: model.neurons.as_ref().map(ParamSet::zeros_like),
            iseor: cfg.joint.then(|| model.iseor.zeros_like()),
        };
        for &i in &batch {
            let p = &data[i];
            let (h_s, iseor_cache): (Array2<f64>, Option<IseorCache>) = match &frozen {
                Some(h) => (h[i].clone(), None),
                None => {
                    let emb = pool_token_ids(&p.token_ids, &model.embedding);
                    let (h, c) = iseor_forward(&model.iseor, &emb);
                    (h, Some(c))
                }
            };
            let (h_g, g_cache) = gfeor_forward(&model.gfeor.gat, &h_s, &p.edges)?;
            let (logit, m_cache) = mlp_forward(&model.gfeor.mlp, &h_g);
            let (bce, d_logit) = bce_with_logit(logit, if p.label { 1.0 } else { 0.0 });
            let mut loss = beta * bce;
            let (g_mlp, mut d_hg) = mlp_backward(&model.gfeor.mlp, &m_cache, beta * d_logit);
            grads.mlp.axpy(1.0, &g_mlp);

            if let (Some(neurons), Some(teacher), Some(g_nd)) =
                (model.neurons.as_ref(), p.teacher.as_ref(), grads.neurons.as_mut())
            {
                let (h_t, nd_cache) = nd_forward(neurons, teacher)?;
                let (l, d_t, d_s) = match cfg.distill {
                    DistillMode::FeatureMse => feature_mse_grad(&h_t, &h_g)?,
                    _ => msl_loss_grad(&h_t, &h_g)?,
                };
                loss += alpha * l;
                d_hg.scaled_add(alpha, &d_s);
                let (g, _) = nd_backward(neurons, &nd_cache, &(d_t * alpha));
                g_nd.axpy(1.0, &g);
            }

            let (g_gat, d_hs) = gfeor_backward(&model.gfeor.gat, &g_cache, &d_hg);
            grads.gat.axpy(1.0, &g_gat);
            if let (Some(c), Some(g_is)) = (iseor_cache.as_ref(), grads.iseor.as_mut()) {
                let (g, _) = iseor_backward(&model.iseor, c, &d_hs);
                g_is.axpy(1.0, &g);
            }
            total += loss;
        }
        let step = -cfg.stage_b_lr / batch.len() as f64;
        model.gfeor.gat.axpy(step, &grads.gat);
        model.gfeor.mlp.axpy(step, &grads.mlp);
        if let (Some(n), Some(g)) = (model.neurons.as_mut(), grads.neurons.as_ref()) {
            n.axpy(step, g);
        }
        if let Some(g) = grads.iseor.as_ref() {
            model.iseor.axpy(step, g);
        }
    }
    Ok(total / data.len() as f64)
}
