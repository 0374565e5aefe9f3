//! Joint loss over both passes and the optimizer step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TextInput, EOS};
use super::offline::offline_forward;
use super::online::{online_decoder_forward, online_encoder_chunked, online_greedy_hypothesis, predictor_chunk_logits};
use super::params::{Graph, ModelParams};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numerics::{optimizer_step, Dropout, OptimizerState, Reduction, Tensor, Var};
use crate::scama::{chunk_counts_from_alignment, expand_mask_to_frames, joint_loss, scama_cross_attention_mask};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Mean label-smoothed cross entropy per target token, first pass.
    pub l_online: f64,
    /// The same for the second pass (targets include EOS).
    pub l_offline: f64,
    /// Predictor cross entropy summed over chunks, averaged over utterances.
    pub l_pred: f64,
    pub l_total: f64,
}

/// Uniform draw from the configured chunk sizes.
pub fn dlt_sample_chunk_size(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<usize> {
    if cfg.chunk_sizes.is_empty() {
        return Err(Error::config("chunk_sizes", "must not be empty"));
    }
    Ok(cfg.chunk_sizes[rng.random_range(0..cfg.chunk_sizes.len())])
}

struct UtteranceTerms {
    online: Option<Var>,
    offline: Var,
    pred: Var,
    n_online: usize,
    n_offline: usize,
}

fn utterance_terms(g: &Graph, u: &Utterance, chunk_size: usize) -> Result<UtteranceTerms> {
    let cfg = g.config();
    let tape = g.tape();
    let frames = u.frames();
    let n = u.transcript.len();
    let alignment = chunk_counts_from_alignment(&u.spans, frames, chunk_size, cfg.n_max)?;

    let x = tape.constant(u.features.clone());
    let chunks = online_encoder_chunked(g, &x, chunk_size)?;
    let refs: Vec<&Var> = chunks.iter().collect();
    let e1 = tape.concat_rows(&refs)?;

    let pred_rows: Vec<Var> = chunks
        .iter()
        .map(|c| predictor_chunk_logits(g, c, chunk_size))
        .collect::<Result<_>>()?;
    let pred_refs: Vec<&Var> = pred_rows.iter().collect();
    let pred_logits = tape.concat_rows(&pred_refs)?;
    let pred = tape.cross_entropy(&pred_logits, &alignment.counts, 0.0, None, Reduction::Sum)?;

    let (online, y1) = if n == 0 {
        (None, Vec::new())
    } else {
        let mask = scama_cross_attention_mask(&alignment, n, alignment.n_chunks())?;
        let mask = expand_mask_to_frames(&mask, chunk_size, frames);
        let logits = online_decoder_forward(g, &u.transcript, &e1, &mask)?;
        let ce = tape.cross_entropy(&logits, &u.transcript, cfg.label_smoothing, None, Reduction::Sum)?;
        let y1 = match cfg.text_input {
            TextInput::Truth => u.transcript.clone(),
            TextInput::Greedy => online_greedy_hypothesis(g.params(), cfg, &u.features, chunk_size)?,
        };
        (Some(ce), y1)
    };

    let mut off_targets = u.transcript.clone();
    off_targets.push(EOS);
    let off_logits = offline_forward(g, &x, &e1, &y1, &u.transcript)?;
    let offline = tape.cross_entropy(&off_logits, &off_targets, cfg.label_smoothing, None, Reduction::Sum)?;
    Ok(UtteranceTerms {
        online,
        offline,
        pred,
        n_online: n,
        n_offline: n + 1,
    })
}

fn sum_scalars(g: &Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = g.tape().constant(Tensor::scalar(0.0));
    for t in terms {
        acc = g.tape().add(&acc, t)?;
    }
    Ok(acc)
}

/// The joint objective `l_online + λ_off·l_offline + α·l_pred` over a batch, with one chunk
/// size per utterance.
pub fn batch_loss(g: &Graph, batch: &[&Utterance], chunk_sizes: &[usize]) -> Result<(Var, LossReport)> {
    if batch.is_empty() || batch.len() != chunk_sizes.len() {
        return Err(Error::contract(format!(
            "batch of {} utterances with {} chunk sizes",
            batch.len(),
            chunk_sizes.len()
        )));
    }
    let cfg = g.config();
    let tape = g.tape();
    let mut online = Vec::new();
    let mut offline = Vec::new();
    let mut pred = Vec::new();
    let (mut n_on, mut n_off) = (0, 0);
    for (index, (u, &c)) in batch.iter().zip(chunk_sizes).enumerate() {
        let t = utterance_terms(g, u, c).map_err(|e| Error::Utterance {
            index,
            source: Box::new(e),
        })?;
        online.extend(t.online);
        offline.push(t.offline);
        pred.push(t.pred);
        n_on += t.n_online;
        n_off += t.n_offline;
    }
    let l_online = tape.scale(&sum_scalars(g, &online)?, 1.0 / n_on.max(1) as f64);
    let l_offline = tape.scale(&sum_scalars(g, &offline)?, 1.0 / n_off as f64);
    let l_pred = tape.scale(&sum_scalars(g, &pred)?, 1.0 / batch.len() as f64);
    let l_e2e = tape.add(&l_online, &tape.scale(&l_offline, cfg.lambda_offline))?;
    let total = joint_loss(tape, &l_e2e, &l_pred, cfg.alpha)?;
    let report = LossReport {
        l_online: l_online.value().item(),
        l_offline: l_offline.value().item(),
        l_pred: l_pred.value().item(),
        l_total: total.value().item(),
    };
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite("l_total".into()));
    }
    Ok((total, report))
}

/// Randomness consumed by one training step, drawn up front so the step can be replayed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepDraws {
    pub chunk_sizes: Vec<usize>,
    pub dropout_seed: u64,
}

impl StepDraws {
    pub fn sample(cfg: &ModelConfig, batch_len: usize, rng: &mut impl Rng) -> Result<Self> {
        let chunk_sizes = (0..batch_len)
            .map(|_| dlt_sample_chunk_size(cfg, rng))
            .collect::<Result<_>>()?;
        Ok(StepDraws {
            chunk_sizes,
            dropout_seed: rng.random(),
        })
    }

    fn dropout(&self, cfg: &ModelConfig) -> Dropout {
        Dropout::new(cfg.dropout, ChaCha8Rng::seed_from_u64(self.dropout_seed))
    }
}

/// Loss and parameter gradients for a batch under fixed draws.
pub fn loss_and_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[&Utterance],
    draws: &StepDraws,
) -> Result<(LossReport, std::collections::BTreeMap<String, Tensor>)> {
    let g = Graph::new(params, cfg, true, draws.dropout(cfg));
    let (total, report) = batch_loss(&g, batch, &draws.chunk_sizes)?;
    Ok((report, g.gradients(&total)?))
}

/// Loss only, without recording, under the same draws.
pub fn loss_only(params: &ModelParams, cfg: &ModelConfig, batch: &[&Utterance], draws: &StepDraws) -> Result<LossReport> {
    let g = Graph::new(params, cfg, false, draws.dropout(cfg));
    Ok(batch_loss(&g, batch, &draws.chunk_sizes)?.1)
}

/// Samples chunk sizes, computes the joint loss, backpropagates and applies one optimizer update.
pub fn universal_training_step(
    batch: &[&Utterance],
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<LossReport> {
    let draws = StepDraws::sample(cfg, batch.len(), rng)?;
    let (report, grads) = loss_and_gradients(params, cfg, batch, &draws)?;
    optimizer_step(params.tensors_mut(), &grads, opt)?;
    Ok(report)
}
