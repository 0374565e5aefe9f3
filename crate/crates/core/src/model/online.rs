//! First pass: chunk encoder, token-count predictor and the truncated-attention decoder.

use super::params::Graph;
use crate::attention::{
    fsmn_memory, lc_san_m_chunk_step, lc_san_m_oracle_full, FsmnTaps, LayerStreamState, MhaParams, NormParams,
};
use crate::attention::{feed_forward, layer_norm, FeedForwardParams};
use crate::error::{Error, Result};
use crate::numerics::{Mask, Tensor, Var};
use crate::scama::{argmax, splice_chunk};

use super::config::{ModelConfig, BOS};
use super::offline::best_token;
use super::params::ModelParams;

pub fn online_encoder_states(g: &Graph) -> Vec<LayerStreamState> {
    (0..g.config().online_encoder_layers).map(|_| LayerStreamState::new()).collect()
}

/// Encodes one chunk, advancing every layer state. Returns the chunk memory `[c×d_model]`.
pub fn online_encoder_forward(g: &Graph, x_chunk: &Var, states: &mut [LayerStreamState]) -> Result<Var> {
    let cfg = g.config();
    if states.len() != cfg.online_encoder_layers {
        return Err(Error::contract(format!(
            "{} layer states for {} layers",
            states.len(),
            cfg.online_encoder_layers
        )));
    }
    if states.windows(2).any(|w| w[0].chunk_index() != w[1].chunk_index()) {
        return Err(Error::contract("encoder layer states are out of step"));
    }
    let mut h = g.linear(x_chunk, "online_encoder.input")?;
    for (i, state) in states.iter_mut().enumerate() {
        let p = g.san_m(&format!("online_encoder.layers.{i}"), false)?;
        h = lc_san_m_chunk_step(g.tape(), &h, &p, state, g.dropout())?;
    }
    g.layer_norm(&h, "online_encoder.after_norm")
}

/// Runs the chunk loop over a whole utterance and returns all chunk memories stacked `[T×d]`.
pub fn online_encoder_chunked(g: &Graph, x: &Var, chunk_size: usize) -> Result<Vec<Var>> {
    if chunk_size == 0 {
        return Err(Error::contract("chunk size must be at least 1"));
    }
    let frames = x.shape()[0];
    let mut states = online_encoder_states(g);
    let mut out = Vec::with_capacity(frames.div_ceil(chunk_size));
    let mut start = 0;
    while start < frames {
        let len = chunk_size.min(frames - start);
        let chunk = g.tape().slice_rows(x, start, len)?;
        out.push(online_encoder_forward(g, &chunk, &mut states)?);
        start += len;
    }
    Ok(out)
}

/// The whole online encoder as one masked full-sequence pass.
pub fn online_encoder_oracle(g: &Graph, x: &Var, chunk_size: usize) -> Result<Var> {
    let mut h = g.linear(x, "online_encoder.input")?;
    for i in 0..g.config().online_encoder_layers {
        let p = g.san_m(&format!("online_encoder.layers.{i}"), false)?;
        h = lc_san_m_oracle_full(g.tape(), &h, &p, chunk_size, g.dropout())?;
    }
    g.layer_norm(&h, "online_encoder.after_norm")
}

/// Predictor scores `[1×(N_max+1)]` for one chunk of encoder memory.
pub fn predictor_chunk_logits(g: &Graph, chunk_memory: &Var, chunk_size: usize) -> Result<Var> {
    let p = g.predictor(chunk_size)?;
    let spliced = splice_chunk(g.tape(), chunk_memory, chunk_size)?;
    crate::scama::predictor_logits(g.tape(), &spliced, &p)
}

pub(crate) struct DecoderLayer {
    pub norm1: NormParams,
    pub fsmn: FsmnTaps,
    pub norm2: NormParams,
    pub cross: MhaParams,
    pub norm3: NormParams,
    pub ffn: FeedForwardParams,
}

fn decoder_layer(g: &Graph, i: usize) -> Result<DecoderLayer> {
    let p = format!("online_decoder.layers.{i}");
    Ok(DecoderLayer {
        norm1: g.norm(&format!("{p}.norm1"))?,
        fsmn: FsmnTaps {
            left: g.param(&format!("{p}.fsmn.left"))?,
            right: None,
        },
        norm2: g.norm(&format!("{p}.norm2"))?,
        cross: g.mha(&format!("{p}.cross"))?,
        norm3: g.norm(&format!("{p}.norm3"))?,
        ffn: g.ffn(&format!("{p}.ffn"))?,
    })
}

/// Decoder inputs for teacher forcing: `[BOS, y_0, .., y_{N-2}]`.
pub fn shift_right(targets: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(targets.iter().copied())
        .take(targets.len())
        .collect()
}

/// Teacher-forced first-pass decoder. `mask` is `[N×T]` over encoder frames.
pub fn online_decoder_forward(g: &Graph, targets: &[usize], memory: &Var, mask: &Mask) -> Result<Var> {
    let n = targets.len();
    let frames = memory.shape()[0];
    if mask.rows() != n || mask.cols() != frames {
        return Err(Error::Dimension {
            op: "online_decoder_forward",
            lhs: vec![mask.rows(), mask.cols()],
            rhs: vec![n, frames],
        });
    }
    mask.check_rows_nonempty()?;
    let tape = g.tape();
    let cfg = g.config();
    let eps = cfg.layer_norm_eps;
    let drop = g.dropout();
    let mask = (!mask.all_true()).then_some(mask);
    let mut h = g.embed("online_decoder.embed", &shift_right(targets))?;
    for i in 0..cfg.online_decoder_layers {
        let l = decoder_layer(g, i)?;
        let m = fsmn_memory(tape, &layer_norm(tape, &h, &l.norm1, eps)?, &l.fsmn, true, None)?;
        h = tape.add(&h, &drop.apply(tape, &m)?)?;
        let z = layer_norm(tape, &h, &l.norm2, eps)?;
        let c = crate::attention::multi_head_attention(tape, &z, memory, &l.cross, cfg.heads, mask)?;
        h = tape.add(&h, &drop.apply(tape, &c)?)?;
        let f = feed_forward(tape, &layer_norm(tape, &h, &l.norm3, eps)?, &l.ffn)?;
        h = tape.add(&h, &drop.apply(tape, &f)?)?;
    }
    let h = g.layer_norm(&h, "online_decoder.after_norm")?;
    g.linear(&h, "online_decoder.output")
}

/// Incremental decoder state for streaming: projected encoder keys/values per layer and the
/// look-back rows of each target-side memory block.
#[derive(Clone, Debug, Default)]
pub struct DecoderStream {
    keys: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
    fsmn_left: Vec<Option<Tensor>>,
    memory_rows: usize,
    next_input: usize,
}

fn append(cache: &mut Option<Tensor>, rows: &Tensor) -> Result<()> {
    *cache = Some(match cache.take() {
        None => rows.clone(),
        Some(c) => {
            let mut data = c.into_data();
            data.extend_from_slice(rows.data());
            Tensor::new(&[data.len() / rows.cols(), rows.cols()], data)?
        }
    });
    Ok(())
}

impl DecoderStream {
    pub fn new(layers: usize) -> Self {
        DecoderStream {
            keys: vec![None; layers],
            values: vec![None; layers],
            fsmn_left: vec![None; layers],
            memory_rows: 0,
            next_input: BOS,
        }
    }

    pub fn memory_rows(&self) -> usize {
        self.memory_rows
    }

    /// Makes a new chunk of encoder memory visible to subsequent steps.
    pub fn extend_memory(&mut self, g: &Graph, chunk_memory: &Var) -> Result<()> {
        let tape = g.tape();
        for i in 0..self.keys.len() {
            let l = decoder_layer(g, i)?;
            let k = tape.matmul(chunk_memory, &l.cross.wk)?;
            let v = tape.matmul(chunk_memory, &l.cross.wv)?;
            append(&mut self.keys[i], k.value())?;
            append(&mut self.values[i], v.value())?;
        }
        self.memory_rows += chunk_memory.shape()[0];
        Ok(())
    }

    /// One decoder step on the previously emitted token; returns logits `[1×V]`. The caller
    /// commits the chosen token with [`DecoderStream::commit`].
    pub fn step(&mut self, g: &Graph) -> Result<Var> {
        if self.memory_rows == 0 {
            return Err(Error::State("decoder step before any encoder memory"));
        }
        let tape = g.tape();
        let cfg = g.config();
        let eps = cfg.layer_norm_eps;
        let mut h = g.embed("online_decoder.embed", &[self.next_input])?;
        for i in 0..self.keys.len() {
            let l = decoder_layer(g, i)?;
            let z = layer_norm(tape, &h, &l.norm1, eps)?;
            let ctx = self.fsmn_left[i].as_ref().map(|t| tape.constant(t.clone()));
            let m = fsmn_memory(tape, &z, &l.fsmn, true, ctx.as_ref())?;
            let keep = l.fsmn.order_left().saturating_sub(1);
            if keep > 0 {
                append(&mut self.fsmn_left[i], z.value())?;
                let hist = self.fsmn_left[i].as_ref().expect("just appended");
                if hist.rows() > keep {
                    self.fsmn_left[i] = Some(hist.slice_rows(hist.rows() - keep, keep));
                }
            }
            h = tape.add(&h, &m)?;
            let z = layer_norm(tape, &h, &l.norm2, eps)?;
            let q = tape.matmul(&z, &l.cross.wq)?;
            let k = tape.constant(self.keys[i].clone().expect("memory present"));
            let v = tape.constant(self.values[i].clone().expect("memory present"));
            let c = tape.matmul(&tape.attention(&q, &k, &v, cfg.heads, None)?, &l.cross.wo)?;
            h = tape.add(&h, &c)?;
            let f = feed_forward(tape, &layer_norm(tape, &h, &l.norm3, eps)?, &l.ffn)?;
            h = tape.add(&h, &f)?;
        }
        let h = g.layer_norm(&h, "online_decoder.after_norm")?;
        g.linear(&h, "online_decoder.output")
    }

    pub fn commit(&mut self, token: usize) {
        self.next_input = token;
    }
}

/// The first-pass hypothesis exactly as a streaming session would produce it: chunkwise
/// encoding, predicted token counts, greedy decoder steps. No dropout, no gradients.
pub fn online_greedy_hypothesis(
    params: &ModelParams,
    cfg: &ModelConfig,
    features: &Tensor,
    chunk_size: usize,
) -> Result<Vec<usize>> {
    let g = Graph::inference(params, cfg);
    let x = g.tape().constant(features.clone());
    let mut dec = DecoderStream::new(cfg.online_decoder_layers);
    let mut hyp = Vec::new();
    for chunk in online_encoder_chunked(&g, &x, chunk_size)? {
        let logits = predictor_chunk_logits(&g, &chunk, chunk_size)?;
        let steps = argmax(logits.value().data());
        dec.extend_memory(&g, &chunk)?;
        for _ in 0..steps {
            let token = best_token(dec.step(&g)?.value().data(), false);
            dec.commit(token);
            hyp.push(token);
        }
    }
    Ok(hyp)
}
