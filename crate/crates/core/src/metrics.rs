//! Token error rate.

/// Minimum number of substitutions, insertions and deletions turning `hyp` into `reference`.
pub fn levenshtein(reference: &[usize], hyp: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()]
}

/// Corpus-level accumulator: total edits over total reference tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TerCounter {
    pub edits: usize,
    pub reference_tokens: usize,
}

impl TerCounter {
    pub fn add(&mut self, reference: &[usize], hyp: &[usize]) {
        self.edits += levenshtein(reference, hyp);
        self.reference_tokens += reference.len();
    }

    /// `edits / reference_tokens`; an empty reference set scores 0 only when nothing was emitted.
    pub fn ter(&self) -> f64 {
        match (self.edits, self.reference_tokens) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, r) => e as f64 / r as f64,
        }
    }
}
