//! SAN-M layers: multi-head attention with an FSMN memory block added to its output, in
//! full-sequence form and in the chunk-incremental (latency-controlled) form.

use crate::error::{Error, Result};
use crate::numerics::{Dropout, Mask, Tape, Var};

/// Packed projections. Head `i` uses columns `i*d_k..(i+1)*d_k` of `wq`, `wk`, `wv`.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Memory-block taps. `left` row `i` weighs `v_{t-i}` (so row 0 is the current frame);
/// `right` row `j-1` weighs `v_{t+j}`.
#[derive(Clone, Debug)]
pub struct FsmnTaps {
    pub left: Var,
    pub right: Option<Var>,
}

impl FsmnTaps {
    pub fn order_left(&self) -> usize {
        self.left.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct SanMLayerParams {
    pub heads: usize,
    pub norm_eps: f64,
    pub norm1: NormParams,
    pub attn: MhaParams,
    pub fsmn: FsmnTaps,
    pub norm2: NormParams,
    pub ffn: FeedForwardParams,
}

impl SanMLayerParams {
    pub fn d_model(&self) -> usize {
        self.attn.wq.shape()[1]
    }
}

/// The two summands of `Y = MultiHead(X) + M` plus the projected values they came from.
#[derive(Clone, Debug)]
pub struct SanMCore {
    pub attention: Var,
    pub memory: Var,
    pub values: Var,
}

impl SanMCore {
    pub fn output(&self, tape: &Tape) -> Result<Var> {
        tape.add(&self.attention, &self.memory)
    }
}

pub fn layer_norm(tape: &Tape, x: &Var, p: &NormParams, eps: f64) -> Result<Var> {
    tape.layer_norm(x, &p.gamma, &p.beta, eps)
}

pub fn feed_forward(tape: &Tape, x: &Var, p: &FeedForwardParams) -> Result<Var> {
    let h = tape.relu(&tape.add_bias(&tape.matmul(x, &p.w1)?, &p.b1)?);
    tape.add_bias(&tape.matmul(&h, &p.w2)?, &p.b2)
}

/// `[head_1, .., head_h] W^O` with `head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i`.
pub fn multi_head_attention(
    tape: &Tape,
    x_q: &Var,
    x_kv: &Var,
    p: &MhaParams,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<Var> {
    let q = tape.matmul(x_q, &p.wq)?;
    let k = tape.matmul(x_kv, &p.wk)?;
    let v = tape.matmul(x_kv, &p.wv)?;
    let ctx = tape.attention(&q, &k, &v, heads, mask)?;
    tape.matmul(&ctx, &p.wo)
}

/// FSMN memory `m_t = v_t + Σ a_i ⊙ v_{t-i} + Σ c_j ⊙ v_{t+j}`.
///
/// Unidirectional mode requires no look-ahead taps and may continue from a carried
/// `left_context` (the most recent previous value rows).
pub fn fsmn_memory(
    tape: &Tape,
    v: &Var,
    taps: &FsmnTaps,
    unidirectional: bool,
    left_context: Option<&Var>,
) -> Result<Var> {
    if unidirectional && taps.right.is_some() {
        return Err(Error::contract("unidirectional FSMN with look-ahead taps"));
    }
    if !unidirectional && left_context.is_some() {
        return Err(Error::contract("left context passed to a bidirectional FSMN"));
    }
    let filtered = tape.depthwise_conv1d(v, &taps.left, taps.right.as_ref(), left_context)?;
    tape.add(v, &filtered)
}

/// Attention plus memory over an already-normalised input, full-sequence form.
pub fn san_m_core(tape: &Tape, z: &Var, p: &SanMLayerParams, mask: Option<&Mask>) -> Result<SanMCore> {
    let q = tape.matmul(z, &p.attn.wq)?;
    let k = tape.matmul(z, &p.attn.wk)?;
    let v = tape.matmul(z, &p.attn.wv)?;
    let ctx = tape.attention(&q, &k, &v, p.heads, mask)?;
    let attention = tape.matmul(&ctx, &p.attn.wo)?;
    let memory = fsmn_memory(tape, &v, &p.fsmn, p.fsmn.right.is_none(), None)?;
    Ok(SanMCore {
        attention,
        memory,
        values: v,
    })
}

/// Pre-norm residual wrapper shared by both layer forms: `h = x + core(LN(x))`,
/// `y = h + FFN(LN(h))`.
fn residual_block(
    tape: &Tape,
    x: &Var,
    p: &SanMLayerParams,
    dropout: &Dropout,
    core: impl FnOnce(&Var) -> Result<SanMCore>,
) -> Result<Var> {
    let z = layer_norm(tape, x, &p.norm1, p.norm_eps)?;
    let c = core(&z)?.output(tape)?;
    let h = tape.add(x, &dropout.apply(tape, &c)?)?;
    let f = feed_forward(tape, &layer_norm(tape, &h, &p.norm2, p.norm_eps)?, &p.ffn)?;
    tape.add(&h, &dropout.apply(tape, &f)?)
}

/// Full-sequence SAN-M layer. Bidirectional memory when `p.fsmn.right` is present.
pub fn san_m_layer(
    tape: &Tape,
    x: &Var,
    p: &SanMLayerParams,
    mask: Option<&Mask>,
    dropout: &Dropout,
) -> Result<Var> {
    residual_block(tape, x, p, dropout, |z| san_m_core(tape, z, p, mask))
}

/// `allow(t, s) ⇔ ⌊s/c⌋ ≤ ⌊t/c⌋`: every frame sees its own chunk and all earlier ones.
pub fn chunk_causal_mask(frames: usize, chunk_size: usize) -> Mask {
    Mask::from_fn(frames, frames, |t, s| s / chunk_size <= t / chunk_size)
}

/// Per-layer online state: cumulative key/value caches and the FSMN look-back buffer.
#[derive(Clone, Debug, Default)]
pub struct LayerStreamState {
    keys: Option<Var>,
    values: Option<Var>,
    fsmn_left: Option<Var>,
    frames: usize,
    chunks: usize,
    finalized: bool,
}

impl LayerStreamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Frames consumed so far (equals the cache length).
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Index of the next chunk to be processed.
    pub fn chunk_index(&self) -> usize {
        self.chunks
    }

    pub fn cache_len(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.shape()[0])
    }

    pub fn fsmn_left_len(&self) -> usize {
        self.fsmn_left.as_ref().map_or(0, |k| k.shape()[0])
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn finalize(&mut self) {
        self.finalized = true;
    }
}

fn append_rows(tape: &Tape, cache: &Option<Var>, rows: &Var) -> Result<Var> {
    match cache {
        Some(c) => tape.concat_rows(&[c, rows]),
        None => Ok(rows.clone()),
    }
}

/// Attention plus unidirectional memory for one chunk against the cached past.
pub fn lc_san_m_chunk_core(
    tape: &Tape,
    z_k: &Var,
    p: &SanMLayerParams,
    state: &mut LayerStreamState,
) -> Result<SanMCore> {
    if state.finalized {
        return Err(Error::contract("chunk step on a finalized layer state"));
    }
    if p.fsmn.right.is_some() {
        return Err(Error::contract("latency-controlled layer with look-ahead taps"));
    }
    let rows = z_k.shape()[0];
    let q = tape.matmul(z_k, &p.attn.wq)?;
    let k = tape.matmul(z_k, &p.attn.wk)?;
    let v = tape.matmul(z_k, &p.attn.wv)?;
    let keys = append_rows(tape, &state.keys, &k)?;
    let values = append_rows(tape, &state.values, &v)?;
    let ctx = tape.attention(&q, &keys, &values, p.heads, None)?;
    let attention = tape.matmul(&ctx, &p.attn.wo)?;
    let memory = fsmn_memory(tape, &v, &p.fsmn, true, state.fsmn_left.as_ref())?;

    let keep = p.fsmn.order_left().saturating_sub(1);
    state.fsmn_left = if keep == 0 {
        None
    } else {
        let history = append_rows(tape, &state.fsmn_left, &v)?;
        let n = history.shape()[0];
        Some(if n > keep {
            tape.slice_rows(&history, n - keep, keep)?
        } else {
            history
        })
    };
    state.keys = Some(keys);
    state.values = Some(values);
    state.frames += rows;
    state.chunks += 1;
    Ok(SanMCore {
        attention,
        memory,
        values: v,
    })
}

/// One latency-controlled SAN-M step: queries of the chunk attend to every cached key of
/// the current and previous chunks; the memory block looks back only.
pub fn lc_san_m_chunk_step(
    tape: &Tape,
    x_k: &Var,
    p: &SanMLayerParams,
    state: &mut LayerStreamState,
    dropout: &Dropout,
) -> Result<Var> {
    if x_k.shape()[0] == 0 {
        return Err(Error::contract("empty chunk"));
    }
    residual_block(tape, x_k, p, dropout, |z| lc_san_m_chunk_core(tape, z, p, state))
}

/// The same computation as a sequence of chunk steps, done in one pass with a
/// block-lower-triangular mask. Serves as the equivalence oracle for the incremental path.
pub fn lc_san_m_oracle_full(
    tape: &Tape,
    x: &Var,
    p: &SanMLayerParams,
    chunk_size: usize,
    dropout: &Dropout,
) -> Result<Var> {
    if chunk_size == 0 {
        return Err(Error::contract("chunk size must be at least 1"));
    }
    if p.fsmn.right.is_some() {
        return Err(Error::contract("latency-controlled layer with look-ahead taps"));
    }
    let mask = chunk_causal_mask(x.shape()[0], chunk_size);
    let mask = (!mask.all_true()).then_some(mask);
    san_m_layer(tape, x, p, mask.as_ref(), dropout)
}
