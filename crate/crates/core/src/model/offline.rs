//! Second pass: stride-conv downsampling, full-sequence acoustic encoder, text encoder over
//! the first-pass hypothesis, and the decoder attending to both memories.

use super::config::{BOS, EOS, FIRST_TOKEN};
use super::params::Graph;
use crate::attention::{feed_forward, fsmn_memory, layer_norm, multi_head_attention, san_m_layer, FsmnTaps};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scama::argmax;

/// Strided 1-D convolution with symmetric zero padding `(kernel-1)/2`, output length
/// `⌈T/stride⌉`. `weight` is `[(kernel·D)×out]`, tap `j` occupying rows `j·D..(j+1)·D`.
pub fn stride_conv_linear(
    tape: &Tape,
    x: &Var,
    weight: &Var,
    bias: &Var,
    kernel: usize,
    stride: usize,
) -> Result<Var> {
    let frames = x.shape()[0];
    if frames == 0 {
        return Err(Error::contract("stride convolution over zero frames"));
    }
    if kernel.is_multiple_of(2) || stride == 0 {
        return Err(Error::contract(format!("kernel {kernel} must be odd and stride {stride} positive")));
    }
    let pad = kernel / 2;
    let out_rows = frames.div_ceil(stride);
    let taps: Vec<Var> = (0..kernel)
        .map(|j| {
            let idx: Vec<Option<usize>> = (0..out_rows)
                .map(|r| {
                    let t = (r * stride + j) as isize - pad as isize;
                    (t >= 0 && (t as usize) < frames).then_some(t as usize)
                })
                .collect();
            tape.gather_rows(x, &idx)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Var> = taps.iter().collect();
    let windows = tape.concat_cols(&refs)?;
    tape.add_bias(&tape.matmul(&windows, weight)?, bias)
}

/// `LayerNorm(ReLU(conv(x)))` over `concat(X, E¹)` rows: `[T×(d_input+d_model)] → [⌈T/2⌉×d_model]`.
pub fn stride_conv_downsample(g: &Graph, x: &Var) -> Result<Var> {
    let cfg = g.config();
    let w = g.param("stride_conv.weight")?;
    let b = g.param("stride_conv.bias")?;
    let y = stride_conv_linear(g.tape(), x, &w, &b, cfg.stride_kernel, cfg.stride)?;
    g.layer_norm(&g.tape().relu(&y), "stride_conv.norm")
}

/// Acoustic memory E² from raw frames and the online memory E¹.
pub fn full_encoder(g: &Graph, x: &Var, e1: &Var) -> Result<Var> {
    if x.shape()[0] != e1.shape()[0] {
        return Err(Error::Dimension {
            op: "full_encoder",
            lhs: x.shape().to_vec(),
            rhs: e1.shape().to_vec(),
        });
    }
    let joined = g.tape().concat_cols(&[x, e1])?;
    let mut h = stride_conv_downsample(g, &joined)?;
    for i in 0..g.config().full_encoder_layers {
        let p = g.san_m(&format!("full_encoder.layers.{i}"), true)?;
        h = san_m_layer(g.tape(), &h, &p, None, g.dropout())?;
    }
    g.layer_norm(&h, "full_encoder.after_norm")
}

/// Semantic memory E³ over `[BOS, first-pass tokens..]`; an empty hypothesis encodes a lone
/// BOS row. The leading BOS gives the memory blocks a fixed anchor to measure position from.
pub fn text_encoder(g: &Graph, tokens: &[usize]) -> Result<Var> {
    let input: Vec<usize> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
    let mut h = g.embed("text_encoder.embed", &input)?;
    for i in 0..g.config().text_encoder_layers {
        let p = g.san_m(&format!("text_encoder.layers.{i}"), true)?;
        h = san_m_layer(g.tape(), &h, &p, None, g.dropout())?;
    }
    g.layer_norm(&h, "text_encoder.after_norm")
}

/// Memories the second-pass decoder attends to. `semantic` is absent when the text
/// encoder is disabled.
#[derive(Clone, Debug)]
pub struct OfflineMemory {
    pub acoustic: Var,
    pub semantic: Option<Var>,
}

pub fn offline_encode(g: &Graph, x: &Var, e1: &Var, y1: &[usize]) -> Result<OfflineMemory> {
    let acoustic = full_encoder(g, x, e1)?;
    let semantic = if g.config().use_text_encoder {
        Some(text_encoder(g, y1)?)
    } else {
        None
    };
    Ok(OfflineMemory { acoustic, semantic })
}

/// Decoder over `inputs` (starting with BOS). Each layer: target-side memory block, parallel
/// acoustic and semantic attention whose contexts are concatenated and merged back to
/// `d_model`, then feed-forward. Returns logits `[len×V]`.
pub fn offline_decoder_forward(g: &Graph, inputs: &[usize], mem: &OfflineMemory) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::contract("offline decoder needs at least the BOS input"));
    }
    let tape = g.tape();
    let cfg = g.config();
    let eps = cfg.layer_norm_eps;
    let drop = g.dropout();
    let mut h = g.embed("full_decoder.embed", inputs)?;
    for i in 0..cfg.full_decoder_layers {
        let p = format!("full_decoder.layers.{i}");
        let taps = FsmnTaps {
            left: g.param(&format!("{p}.fsmn.left"))?,
            right: None,
        };
        let m = fsmn_memory(tape, &layer_norm(tape, &h, &g.norm(&format!("{p}.norm1"))?, eps)?, &taps, true, None)?;
        h = tape.add(&h, &drop.apply(tape, &m)?)?;

        let z = layer_norm(tape, &h, &g.norm(&format!("{p}.norm2"))?, eps)?;
        let a = multi_head_attention(tape, &z, &mem.acoustic, &g.mha(&format!("{p}.acoustic"))?, cfg.heads, None)?;
        let s = match &mem.semantic {
            Some(e3) => multi_head_attention(tape, &z, e3, &g.mha(&format!("{p}.semantic"))?, cfg.heads, None)?,
            None => tape.constant(Tensor::zeros(a.shape())),
        };
        let merged = g.linear(&tape.concat_cols(&[&a, &s])?, &format!("{p}.merge"))?;
        h = tape.add(&h, &drop.apply(tape, &merged)?)?;

        let f = feed_forward(tape, &layer_norm(tape, &h, &g.norm(&format!("{p}.norm3"))?, eps)?, &g.ffn(&format!("{p}.ffn"))?)?;
        h = tape.add(&h, &drop.apply(tape, &f)?)?;
    }
    let h = g.layer_norm(&h, "full_decoder.after_norm")?;
    g.linear(&h, "full_decoder.output")
}

/// Teacher-forced second pass: logits `[(N+1)×V]` for inputs `[BOS, y..]` predicting `[y.., EOS]`.
pub fn offline_forward(g: &Graph, x: &Var, e1: &Var, y1: &[usize], targets: &[usize]) -> Result<Var> {
    let mem = offline_encode(g, x, e1, y1)?;
    let inputs: Vec<usize> = std::iter::once(BOS).chain(targets.iter().copied()).collect();
    offline_decoder_forward(g, &inputs, &mem)
}

/// Greedy autoregressive decoding over real tokens and EOS, stopping at EOS or `max_len` tokens.
pub fn offline_greedy_decode(g: &Graph, mem: &OfflineMemory, max_len: usize) -> Result<Vec<usize>> {
    let mut inputs = vec![BOS];
    while inputs.len() <= max_len {
        let logits = offline_decoder_forward(g, &inputs, mem)?;
        let last = logits.value().row(inputs.len() - 1);
        let token = best_token(last, true);
        if token == EOS {
            break;
        }
        inputs.push(token);
    }
    Ok(inputs[1..].to_vec())
}

/// Highest-scoring real token, optionally also competing against EOS.
pub fn best_token(logits: &[f64], allow_eos: bool) -> usize {
    let best = FIRST_TOKEN + argmax(&logits[FIRST_TOKEN..]);
    if allow_eos && logits[EOS] > logits[best] {
        EOS
    } else {
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::params::{init_model, ModelParams};
    use crate::model::online::online_encoder_chunked;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::new(&[t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            predictor_hidden: 8,
            ..ModelConfig::default()
        };
        let p = init_model(&cfg, 11).unwrap();
        (cfg, p)
    }

    fn e1_of(g: &Graph, x: &Var, c: usize) -> Var {
        let chunks = online_encoder_chunked(g, x, c).unwrap();
        let refs: Vec<&Var> = chunks.iter().collect();
        g.tape().concat_rows(&refs).unwrap()
    }

    #[test]
    fn downsampled_length_is_half_rounded_up() {
        let (cfg, p) = small();
        let g = Graph::inference(&p, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..=64 {
            let x = g.tape().constant(features(&mut rng, t, cfg.d_input + cfg.d_model));
            assert_eq!(stride_conv_downsample(&g, &x).unwrap().shape(), &[t.div_ceil(2), cfg.d_model]);
        }
        let x = g.tape().constant(Tensor::zeros(&[0, 3]).clone());
        assert!(stride_conv_downsample(&g, &x).is_err());
    }

    #[test]
    fn center_tap_selects_every_other_row() {
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, d) = (7, 3);
        let x = features(&mut rng, t, d);
        let mut w = vec![0.0; 5 * d * d];
        for i in 0..d {
            w[(2 * d + i) * d + i] = 1.0;
        }
        let w = tape.constant(Tensor::new(&[5 * d, d], w).unwrap());
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = stride_conv_linear(&tape, &tape.constant(x.clone()), &w, &b, 5, 2).unwrap();
        for r in 0..4 {
            assert_eq!(y.value().row(r), x.row(2 * r));
        }
    }

    #[test]
    fn conv_window_matches_direct_sum() {
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, d, o) = (6, 2, 3);
        let x = features(&mut rng, t, d);
        let w = features(&mut rng, 5 * d, o);
        let b = features(&mut rng, 1, o).reshape(&[o]).unwrap();
        let y = stride_conv_linear(
            &tape,
            &tape.constant(x.clone()),
            &tape.constant(w.clone()),
            &tape.constant(b.clone()),
            5,
            2,
        )
        .unwrap();
        for r in 0..3 {
            for k in 0..o {
                let mut s = b.data()[k];
                for j in 0..5 {
                    let src = (2 * r + j) as isize - 2;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for i in 0..d {
                        s += x.get2(src as usize, i) * w.get2(j * d + i, k);
                    }
                }
                assert!((y.value().get2(r, k) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_conv_weights_give_beta_rows() {
        let (cfg, mut p) = small();
        for name in ["stride_conv.weight", "stride_conv.bias"] {
            let t = p.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        *p.get_mut("stride_conv.norm.beta").unwrap() = Tensor::full(&[cfg.d_model], 0.5);
        let g = Graph::inference(&p, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.tape().constant(features(&mut rng, 5, cfg.d_input + cfg.d_model));
        let y = stride_conv_downsample(&g, &x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_frame_flows_end_to_end() {
        let (cfg, p) = small();
        let g = Graph::inference(&p, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = g.tape().constant(features(&mut rng, 1, cfg.d_input));
        let e1 = e1_of(&g, &x, 2);
        let mem = offline_encode(&g, &x, &e1, &[]).unwrap();
        assert_eq!(mem.acoustic.shape(), &[1, cfg.d_model]);
        assert_eq!(mem.semantic.as_ref().unwrap().shape(), &[1, cfg.d_model]);
        let logits = offline_forward(&g, &x, &e1, &[], &[FIRST_TOKEN]).unwrap();
        assert_eq!(logits.shape(), &[2, cfg.vocab_size]);
        assert!(offline_greedy_decode(&g, &mem, 2).unwrap().len() <= 2);
    }

    #[test]
    fn text_encoder_ablation_wiring() {
        let (cfg, p) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = features(&mut rng, 9, cfg.d_input);
        let targets = [FIRST_TOKEN, FIRST_TOKEN + 2];
        let logits = |p: &ModelParams, cfg: &ModelConfig, y1: &[usize]| {
            let g = Graph::inference(p, cfg);
            let x = g.tape().constant(xt.clone());
            let e1 = e1_of(&g, &x, 4);
            offline_forward(&g, &x, &e1, y1, &targets).unwrap().value().clone()
        };
        let y1a = [FIRST_TOKEN + 1, FIRST_TOKEN + 4];
        let y1b = [FIRST_TOKEN + 7, FIRST_TOKEN + 2, FIRST_TOKEN];
        let with = logits(&p, &cfg, &y1a);
        assert_ne!(with, logits(&p, &cfg, &y1b));
        let off = ModelConfig {
            use_text_encoder: false,
            ..cfg.clone()
        };
        assert_ne!(with, logits(&p, &off, &y1a));

        let mut zeroed = p.clone();
        let wv = zeroed.get_mut("full_decoder.layers.0.semantic.wv").unwrap();
        *wv = Tensor::zeros(wv.shape());
        assert_eq!(logits(&zeroed, &cfg, &y1a), logits(&zeroed, &cfg, &y1b));
        assert_eq!(logits(&zeroed, &cfg, &y1a), logits(&zeroed, &cfg, &[]));
    }

    #[test]
    fn offline_path_is_deterministic_and_bidirectional() {
        let (cfg, p) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 2;
        let xt = features(&mut rng, 10, cfg.d_input);
        let mut perturbed = xt.clone();
        for v in perturbed.data_mut()[3 * 2 * cfg.d_input..4 * 2 * cfg.d_input].iter_mut() {
            *v += 0.5;
        }
        let run = |x: &Tensor| {
            let g = Graph::inference(&p, &cfg);
            let x = g.tape().constant(x.clone());
            let e1 = e1_of(&g, &x, c);
            let e2 = full_encoder(&g, &x, &e1).unwrap();
            (e1.value().clone(), e2.value().clone())
        };
        let (e1, e2) = run(&xt);
        assert_eq!(run(&xt), (e1.clone(), e2.clone()));
        let (e1p, e2p) = run(&perturbed);
        // Chunk 3 covers frames 6..8: earlier online rows are untouched, acoustic memory
        // changes before the chunk as well.
        assert_eq!(e1.slice_rows(0, 6), e1p.slice_rows(0, 6));
        assert_ne!(e2.row(0), e2p.row(0));
        assert_ne!(e2.row(2), e2p.row(2));
    }
}
