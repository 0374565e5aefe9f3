//! Streaming chunk-aware attention machinery: chunk splicing, the token-count predictor,
//! chunk-level labels derived from frame alignments, and the attention truncation mask.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{Mask, Reduction, Tape, Tensor, Var};

/// Chunk-level labels for one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkAlignment {
    pub chunk_size: usize,
    /// Number of tokens whose last frame falls in each chunk.
    pub counts: Vec<usize>,
    /// Chunk index of every token, nondecreasing.
    pub token_chunk: Vec<usize>,
}

impl ChunkAlignment {
    pub fn n_chunks(&self) -> usize {
        self.counts.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.token_chunk.len()
    }
}

#[derive(Clone, Debug)]
pub struct PredictorParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PredictorParams {
    /// Number of count classes, `N_max + 1`.
    pub fn classes(&self) -> usize {
        self.b2.value().numel()
    }
}

/// Flattens a chunk of encoder output into one row of width `c·d`, zero-padding a short
/// final chunk up to `c` rows.
pub fn splice_chunk(tape: &Tape, chunk: &Var, chunk_size: usize) -> Result<Var> {
    let rows = chunk.shape()[0];
    let d = chunk.value().cols();
    if rows > chunk_size {
        return Err(Error::contract(format!("chunk of {rows} rows exceeds chunk size {chunk_size}")));
    }
    let full = if rows < chunk_size {
        let pad = tape.constant(Tensor::zeros(&[chunk_size - rows, d]));
        tape.concat_rows(&[chunk, &pad])?
    } else {
        chunk.clone()
    };
    tape.reshape(&full, &[1, chunk_size * d])
}

/// Pre-softmax predictor scores: `max(h W1 + b1, 0) W2 + b2`.
pub fn predictor_logits(tape: &Tape, spliced: &Var, p: &PredictorParams) -> Result<Var> {
    let hidden = tape.relu(&tape.add_bias(&tape.matmul(spliced, &p.w1)?, &p.b1)?);
    tape.add_bias(&tape.matmul(&hidden, &p.w2)?, &p.b2)
}

/// Token-count distribution for one spliced chunk.
pub fn predictor_forward(tape: &Tape, spliced: &Var, p: &PredictorParams) -> Result<Var> {
    tape.softmax(&predictor_logits(tape, spliced, p)?)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Converts per-token frame spans into chunk labels. Each token belongs to the chunk holding
/// its last frame.
pub fn chunk_counts_from_alignment(
    spans: &[Range<usize>],
    frames: usize,
    chunk_size: usize,
    n_max: usize,
) -> Result<ChunkAlignment> {
    if chunk_size == 0 {
        return Err(Error::config("chunk_size", "must be at least 1"));
    }
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end || s.end > frames || s.start < prev_end {
            return Err(Error::contract(format!(
                "span {i} ({}..{}) is empty, overlapping or beyond {frames} frames",
                s.start, s.end
            )));
        }
        prev_end = s.end;
    }
    let n_chunks = frames.div_ceil(chunk_size);
    let mut counts = vec![0; n_chunks];
    let token_chunk: Vec<usize> = spans.iter().map(|s| (s.end - 1) / chunk_size).collect();
    for &k in &token_chunk {
        counts[k] += 1;
    }
    if let Some((chunk, &count)) = counts.iter().enumerate().find(|(_, &c)| c > n_max) {
        return Err(Error::Label { chunk, count, n_max });
    }
    Ok(ChunkAlignment {
        chunk_size,
        counts,
        token_chunk,
    })
}

/// `allow(ℓ, k) ⇔ k ≤ token_chunk[ℓ]`, at chunk granularity.
pub fn scama_cross_attention_mask(alignment: &ChunkAlignment, n_tokens: usize, n_chunks: usize) -> Result<Mask> {
    if alignment.token_chunk.len() != n_tokens {
        return Err(Error::Dimension {
            op: "scama_cross_attention_mask",
            lhs: vec![alignment.token_chunk.len()],
            rhs: vec![n_tokens],
        });
    }
    if let Some(&bad) = alignment.token_chunk.iter().find(|&&k| k >= n_chunks) {
        return Err(Error::Index {
            what: "token chunk",
            index: bad,
            bound: n_chunks,
        });
    }
    Ok(Mask::from_fn(n_tokens, n_chunks, |l, k| k <= alignment.token_chunk[l]))
}

/// Repeats each chunk column `chunk_size` times so the mask applies to encoder frames.
pub fn expand_mask_to_frames(mask: &Mask, chunk_size: usize, frames: usize) -> Mask {
    Mask::from_fn(mask.rows(), frames, |l, t| mask.allows(l, t / chunk_size))
}

/// `−Σ_k log p_k[t_k]` over a `K × (N_max+1)` matrix of probabilities.
pub fn predictor_loss(probs: &Tensor, counts: &[usize]) -> Result<f64> {
    let classes = probs.cols();
    if probs.rows() != counts.len() {
        return Err(Error::Dimension {
            op: "predictor_loss",
            lhs: probs.shape().to_vec(),
            rhs: vec![counts.len()],
        });
    }
    let mut total = 0.0;
    for (k, &t) in counts.iter().enumerate() {
        if t >= classes {
            return Err(Error::Index {
                what: "predictor count",
                index: t,
                bound: classes,
            });
        }
        total -= probs.row(k)[t].ln();
    }
    Ok(total)
}

/// The predictor loss on logits, summed over chunks, for training.
pub fn predictor_loss_from_logits(tape: &Tape, logits: &Var, counts: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, counts, 0.0, None, Reduction::Sum)
}

/// `L = L_e2e + α · L_pred`.
pub fn joint_loss(tape: &Tape, l_e2e: &Var, l_pred: &Var, alpha: f64) -> Result<Var> {
    for (name, l) in [("l_e2e", l_e2e), ("l_pred", l_pred)] {
        let v = l.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        if v < 0.0 {
            return Err(Error::contract(format!("{name} is negative ({v})")));
        }
    }
    tape.add(l_e2e, &tape.scale(l_pred, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zeros_predictor(tape: &Tape, width: usize, hidden: usize, classes: usize) -> PredictorParams {
        PredictorParams {
            w1: tape.constant(Tensor::zeros(&[width, hidden])),
            b1: tape.constant(Tensor::zeros(&[hidden])),
            w2: tape.constant(Tensor::zeros(&[hidden, classes])),
            b2: tape.constant(Tensor::zeros(&[classes])),
        }
    }

    #[test]
    fn splice_examples() {
        let tape = Tape::no_grad();
        let chunk = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let s = splice_chunk(&tape, &chunk, 2).unwrap();
        assert_eq!(s.shape(), &[1, 4]);
        assert_eq!(s.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = splice_chunk(&tape, &tape.constant(Tensor::zeros(&[2, 2])), 2).unwrap();
        assert_eq!(z.value().data(), &[0.0; 4]);
        let short = tape.constant(Tensor::from_rows(&[[5.0, 6.0]]).unwrap());
        let s = splice_chunk(&tape, &short, 2).unwrap();
        assert_eq!(s.value().data(), &[5.0, 6.0, 0.0, 0.0]);
        assert!(splice_chunk(&tape, &chunk, 1).is_err());
    }

    #[test]
    fn zero_predictor_is_uniform() {
        let tape = Tape::no_grad();
        let p = zeros_predictor(&tape, 6, 4, 7);
        let h = tape.constant(Tensor::full(&[1, 6], 0.3));
        let probs = predictor_forward(&tape, &h, &p).unwrap();
        for &v in probs.value().data() {
            assert_eq!(v, 1.0 / 7.0);
        }
    }

    #[test]
    fn biased_predictor_prefers_class_zero() {
        let tape = Tape::no_grad();
        let mut p = zeros_predictor(&tape, 6, 4, 7);
        let mut b2 = vec![0.0; 7];
        b2[0] = 10.0;
        p.b2 = tape.constant(Tensor::new(&[7], b2).unwrap());
        let probs = predictor_forward(&tape, &tape.constant(Tensor::full(&[1, 6], 1.0)), &p).unwrap();
        let e10 = 10f64.exp();
        assert_eq!(argmax(probs.value().data()), 0);
        assert!((probs.value().data()[0] - e10 / (e10 + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn label_examples() {
        let a = chunk_counts_from_alignment(&[0..3, 3..6], 6, 4, 6).unwrap();
        assert_eq!(a.counts, vec![1, 1]);
        assert_eq!(a.token_chunk, vec![0, 1]);
        let a = chunk_counts_from_alignment(&[], 4, 2, 6).unwrap();
        assert_eq!(a.counts, vec![0, 0]);
        let a = chunk_counts_from_alignment(&[0..3, 3..6], 6, 8, 6).unwrap();
        assert_eq!(a.counts, vec![2]);
        assert_eq!(a.token_chunk, vec![0, 0]);
    }

    #[test]
    fn label_ceiling_is_a_hard_error() {
        let spans: Vec<Range<usize>> = (0..4).map(|i| i..i + 1).collect();
        match chunk_counts_from_alignment(&spans, 4, 4, 3) {
            Err(Error::Label { chunk: 0, count: 4, n_max: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(chunk_counts_from_alignment(&[0..3, 2..5], 6, 2, 6).is_err());
        assert!(chunk_counts_from_alignment(std::slice::from_ref(&(0..7)), 6, 2, 6).is_err());
    }

    #[test]
    fn mask_examples() {
        let al = ChunkAlignment { chunk_size: 2, counts: vec![1, 1], token_chunk: vec![0, 1] };
        let m = scama_cross_attention_mask(&al, 2, 2).unwrap();
        assert_eq!(m, Mask::new(2, 2, vec![true, false, true, true]).unwrap());
        let al = ChunkAlignment { chunk_size: 2, counts: vec![0, 3], token_chunk: vec![1, 1, 1] };
        assert!(scama_cross_attention_mask(&al, 3, 2).unwrap().all_true());
        let al = ChunkAlignment { chunk_size: 9, counts: vec![2], token_chunk: vec![0, 0] };
        assert!(scama_cross_attention_mask(&al, 2, 1).unwrap().all_true());
        let frames = expand_mask_to_frames(&m, 2, 3);
        assert_eq!(frames, Mask::new(2, 3, vec![true, true, false, true, true, true]).unwrap());
    }

    #[test]
    fn predictor_loss_examples() {
        let one_hot = Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(predictor_loss(&one_hot, &[1, 0]).unwrap(), 0.0);
        let uniform = Tensor::full(&[3, 7], 1.0 / 7.0);
        assert!((predictor_loss(&uniform, &[0, 3, 6]).unwrap() - 3.0 * 7f64.ln()).abs() < 1e-12);
        let half = Tensor::from_rows(&[[0.5, 0.5], [0.25, 0.5]]).unwrap();
        assert!((predictor_loss(&half, &[0, 1]).unwrap() - 1.38629).abs() < 1e-5);
        assert!(predictor_loss(&half, &[0, 2]).is_err());
    }

    #[test]
    fn loss_from_logits_matches_probability_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::no_grad();
        let logits = Tensor::new(&[3, 4], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let l = predictor_loss_from_logits(&tape, &tape.constant(logits.clone()), &[0, 3, 1]).unwrap();
        let probs = tape.softmax(&tape.constant(logits)).unwrap();
        let direct = predictor_loss(probs.value(), &[0, 3, 1]).unwrap();
        assert!((l.value().item() - direct).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_examples() {
        let tape = Tape::no_grad();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        assert!((joint_loss(&tape, &s(1.0), &s(2.0), 0.1).unwrap().value().item() - 1.2).abs() < 1e-15);
        assert_eq!(joint_loss(&tape, &s(1.5), &s(2.0), 0.0).unwrap().value().item(), 1.5);
        assert_eq!(joint_loss(&tape, &s(0.0), &s(0.0), 0.1).unwrap().value().item(), 0.0);
        assert!(joint_loss(&tape, &s(-1.0), &s(0.0), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn counts_conserve_tokens_and_mask_is_monotone(
            lens in prop::collection::vec(1usize..7, 0..12),
            gap in 0usize..3,
            c in 1usize..9,
        ) {
            let mut spans = Vec::new();
            let mut t = gap;
            for l in &lens {
                spans.push(t..t + l);
                t += l;
            }
            let frames = t + gap;
            if frames == 0 {
                return Ok(());
            }
            let al = chunk_counts_from_alignment(&spans, frames, c, 64).unwrap();
            prop_assert_eq!(al.counts.iter().sum::<usize>(), lens.len());
            prop_assert!(al.token_chunk.windows(2).all(|w| w[0] <= w[1]));
            let m = scama_cross_attention_mask(&al, lens.len(), al.n_chunks()).unwrap();
            let mut prev = 0;
            for l in 0..m.rows() {
                let row = m.row(l);
                let width = row.iter().take_while(|&&a| a).count();
                prop_assert!(row[width..].iter().all(|&a| !a));
                prop_assert!(width >= prev && width >= 1);
                prev = width;
            }
        }

        #[test]
        fn predictor_output_is_a_distribution(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::no_grad();
            let mut r = |shape: &[usize]| {
                let n = shape.iter().product();
                tape.constant(Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
            };
            let p = PredictorParams { w1: r(&[8, 5]), b1: r(&[5]), w2: r(&[5, 7]), b2: r(&[7]) };
            let h = r(&[1, 8]);
            let probs = predictor_forward(&tape, &h, &p).unwrap();
            let s: f64 = probs.value().data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(probs.value().data().iter().all(|&v| v >= 0.0));
        }
    }
}
