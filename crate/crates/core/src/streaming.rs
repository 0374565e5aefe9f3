//! Runtime sessions: push chunks, get incremental hypotheses, then finalize with the
//! second pass that replaces the online hypothesis.

use crate::attention::LayerStreamState;
use crate::error::{Error, Result};
use crate::model::{
    best_token, offline_encode, offline_greedy_decode, online_encoder_forward, online_encoder_states,
    predictor_chunk_logits, DecoderStream, Graph, ModelConfig, ModelParams,
};
use crate::numerics::Tensor;
use crate::scama::argmax;

/// Maximum algorithmic delay of a chunk: the whole chunk must arrive before it is processed.
pub fn latency_of_chunk_size(chunk_size: usize, frame_period_ms: f64) -> f64 {
    chunk_size as f64 * frame_period_ms
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialResult {
    pub chunk_index: usize,
    pub emitted: Vec<usize>,
    pub hypothesis: Vec<usize>,
    /// Predictor distribution over token counts `0..=N_max` for this chunk.
    pub count_distribution: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub chunk_size: usize,
    pub max_delay_ms: f64,
    pub chunks: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalResult {
    pub online: Vec<usize>,
    pub rectified: Vec<usize>,
    pub latency: LatencyReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Open,
    Finalized,
}

pub struct StreamSession<'a> {
    params: &'a ModelParams,
    config: &'a ModelConfig,
    chunk_size: usize,
    encoder: Vec<LayerStreamState>,
    decoder: DecoderStream,
    frames: Vec<f64>,
    memory: Vec<f64>,
    hypothesis: Vec<usize>,
    chunks: usize,
    short_chunk_seen: bool,
    phase: Phase,
}

pub fn stream_open<'a>(params: &'a ModelParams, config: &'a ModelConfig, chunk_size: usize) -> Result<StreamSession<'a>> {
    if !config.chunk_sizes.contains(&chunk_size) {
        return Err(Error::config(
            "chunk_size",
            format!("{chunk_size} is not among the trained sizes {:?}", config.chunk_sizes),
        ));
    }
    let g = Graph::inference(params, config);
    Ok(StreamSession {
        params,
        config,
        chunk_size,
        encoder: online_encoder_states(&g),
        decoder: DecoderStream::new(config.online_decoder_layers),
        frames: Vec::new(),
        memory: Vec::new(),
        hypothesis: Vec::new(),
        chunks: 0,
        short_chunk_seen: false,
        phase: Phase::Open,
    })
}

impl StreamSession<'_> {
    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn frames_consumed(&self) -> usize {
        self.frames.len() / self.config.d_input
    }

    pub fn memory_rows(&self) -> usize {
        self.memory.len() / self.config.d_model
    }

    pub fn hypothesis(&self) -> &[usize] {
        &self.hypothesis
    }

    pub fn is_finalized(&self) -> bool {
        self.phase == Phase::Finalized
    }

    /// Encodes one chunk, predicts its token count and runs that many greedy decoder steps.
    /// Only the last chunk of a stream may be shorter than the chunk size.
    pub fn push_chunk(&mut self, x_chunk: &Tensor) -> Result<PartialResult> {
        if self.phase == Phase::Finalized {
            return Err(Error::State("push after finalize"));
        }
        let rows = x_chunk.rows();
        if x_chunk.rank() != 2 || x_chunk.cols() != self.config.d_input {
            return Err(Error::Dimension {
                op: "stream_push_chunk",
                lhs: x_chunk.shape().to_vec(),
                rhs: vec![self.chunk_size, self.config.d_input],
            });
        }
        if rows > self.chunk_size {
            return Err(Error::contract(format!("chunk of {rows} frames exceeds chunk size {}", self.chunk_size)));
        }
        if self.short_chunk_seen {
            return Err(Error::contract("a short chunk must be the last one"));
        }
        self.short_chunk_seen = rows < self.chunk_size;

        let g = Graph::inference(self.params, self.config);
        let x = g.tape().constant(x_chunk.clone());
        let e = online_encoder_forward(&g, &x, &mut self.encoder)?;
        let probs = g.tape().softmax(&predictor_chunk_logits(&g, &e, self.chunk_size)?)?;
        let count_distribution = probs.value().data().to_vec();
        let steps = argmax(&count_distribution);

        self.decoder.extend_memory(&g, &e)?;
        let mut emitted = Vec::with_capacity(steps);
        for _ in 0..steps {
            let logits = self.decoder.step(&g)?;
            let token = best_token(logits.value().data(), false);
            self.decoder.commit(token);
            emitted.push(token);
        }
        self.frames.extend_from_slice(x_chunk.data());
        self.memory.extend_from_slice(e.value().data());
        self.hypothesis.extend_from_slice(&emitted);
        let chunk_index = self.chunks;
        self.chunks += 1;
        Ok(PartialResult {
            chunk_index,
            emitted,
            hypothesis: self.hypothesis.clone(),
            count_distribution,
        })
    }

    /// Runs the second pass over everything pushed so far and closes the session.
    pub fn finalize(&mut self) -> Result<FinalResult> {
        if self.phase == Phase::Finalized {
            return Err(Error::State("session already finalized"));
        }
        self.phase = Phase::Finalized;
        for s in &mut self.encoder {
            s.finalize();
        }
        let frames = self.frames_consumed();
        let rectified = if frames == 0 {
            Vec::new()
        } else {
            let g = Graph::inference(self.params, self.config);
            let x = g
                .tape()
                .constant(Tensor::new(&[frames, self.config.d_input], self.frames.clone())?);
            let e1 = g
                .tape()
                .constant(Tensor::new(&[frames, self.config.d_model], self.memory.clone())?);
            let mem = offline_encode(&g, &x, &e1, &self.hypothesis)?;
            offline_greedy_decode(&g, &mem, 2 * frames.div_ceil(self.config.stride))?
        };
        Ok(FinalResult {
            online: self.hypothesis.clone(),
            rectified,
            latency: LatencyReport {
                chunk_size: self.chunk_size,
                max_delay_ms: latency_of_chunk_size(self.chunk_size, self.config.frame_period_ms),
                chunks: self.chunks,
                frames,
            },
        })
    }

    /// The accumulated online memory, exactly as emitted chunk by chunk.
    pub fn memory(&self) -> Result<Tensor> {
        Tensor::new(&[self.memory_rows(), self.config.d_model], self.memory.clone())
    }
}

/// Pushes `features` in chunks of the session size and finalizes.
pub fn stream_utterance(
    params: &ModelParams,
    config: &ModelConfig,
    features: &Tensor,
    chunk_size: usize,
) -> Result<(Vec<PartialResult>, FinalResult)> {
    let mut s = stream_open(params, config, chunk_size)?;
    let mut partials = Vec::new();
    let mut start = 0;
    while start < features.rows() {
        let len = chunk_size.min(features.rows() - start);
        partials.push(s.push_chunk(&features.slice_rows(start, len))?);
        start += len;
    }
    let fin = s.finalize()?;
    Ok((partials, fin))
}
