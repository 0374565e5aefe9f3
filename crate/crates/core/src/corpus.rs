//! Synthetic aligned corpus: every token owns a fixed random feature template, and an
//! utterance is the concatenation of its tokens' templates plus Gaussian noise.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::FIRST_TOKEN;
use crate::numerics::Tensor;

/// One aligned training example. Transcript ids are model ids (real tokens start at
/// [`FIRST_TOKEN`]); `spans[i]` are the frames of token `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: Tensor,
    pub transcript: Vec<usize>,
    pub spans: Vec<Range<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.transcript.len() != self.spans.len() {
            return Err(Error::contract(format!(
                "{} tokens but {} spans",
                self.transcript.len(),
                self.spans.len()
            )));
        }
        let mut prev = 0;
        for s in &self.spans {
            if s.start < prev || s.start >= s.end || s.end > self.frames() {
                return Err(Error::contract(format!("span {}..{} out of order or range", s.start, s.end)));
            }
            prev = s.end;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Number of real tokens (specials not included).
    pub vocab_size: usize,
    pub d_input: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub template_min: usize,
    pub template_max: usize,
    pub transcript_min: usize,
    pub transcript_max: usize,
    pub noise_std: f64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            seed: 1,
            vocab_size: 32,
            d_input: 8,
            train_utterances: 2000,
            dev_utterances: 200,
            test_utterances: 200,
            template_min: 3,
            template_max: 6,
            transcript_min: 3,
            transcript_max: 8,
            noise_std: 0.2,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "at least 2 tokens are needed"));
        }
        if self.d_input == 0 {
            return Err(Error::config("d_input", "must be at least 1"));
        }
        if self.template_min == 0 || self.template_min > self.template_max {
            return Err(Error::config("template_min", "need 1 <= template_min <= template_max"));
        }
        if self.transcript_min == 0 || self.transcript_min > self.transcript_max {
            return Err(Error::config("transcript_min", "need 1 <= transcript_min <= transcript_max"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("d_input", self.d_input.to_string()),
            ("train_utterances", self.train_utterances.to_string()),
            ("dev_utterances", self.dev_utterances.to_string()),
            ("test_utterances", self.test_utterances.to_string()),
            ("template_min", self.template_min.to_string()),
            ("template_max", self.template_max.to_string()),
            ("transcript_min", self.transcript_min.to_string()),
            ("transcript_max", self.transcript_max.to_string()),
            ("noise_std", self.noise_std.to_string()),
        ] {
            writeln!(s, "{k}={v}").expect("write to string");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
        }
        let mut m = DatasetManifest::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => m.seed = num(k, v)?,
                "vocab_size" => m.vocab_size = num(k, v)?,
                "d_input" => m.d_input = num(k, v)?,
                "train_utterances" => m.train_utterances = num(k, v)?,
                "dev_utterances" => m.dev_utterances = num(k, v)?,
                "test_utterances" => m.test_utterances = num(k, v)?,
                "template_min" => m.template_min = num(k, v)?,
                "template_max" => m.template_max = num(k, v)?,
                "transcript_min" => m.transcript_min = num(k, v)?,
                "transcript_max" => m.transcript_max = num(k, v)?,
                "noise_std" => m.noise_std = num(k, v)?,
                _ => return Err(Error::config(k, "unknown key")),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("expected train/dev/test, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub templates: Vec<Tensor>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Renders a transcript with the given templates. `noise` is added per feature value.
fn render(
    templates: &[Tensor],
    tokens: &[usize],
    noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>,
) -> Result<Utterance> {
    let d = templates[0].cols();
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(tokens.len());
    let mut frames = 0;
    for &t in tokens {
        let tpl = &templates[t - FIRST_TOKEN];
        spans.push(frames..frames + tpl.rows());
        frames += tpl.rows();
        data.extend_from_slice(tpl.data());
    }
    if let Some((dist, rng)) = noise {
        for v in &mut data {
            *v += dist.sample(rng);
        }
    }
    Ok(Utterance {
        features: Tensor::new(&[frames, d], data)?,
        transcript: tokens.to_vec(),
        spans,
    })
}

pub fn synth_dataset_generate(m: &DatasetManifest) -> Result<Dataset> {
    m.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let templates: Vec<Tensor> = (0..m.vocab_size)
        .map(|_| {
            let len = rng.random_range(m.template_min..=m.template_max);
            let data = (0..len * m.d_input).map(|_| unit.sample(&mut rng)).collect();
            Tensor::new(&[len, m.d_input], data)
        })
        .collect::<Result<_>>()?;
    let noise = Normal::new(0.0, m.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
    let mut make = |count: usize| -> Result<Vec<Utterance>> {
        (0..count)
            .map(|_| {
                let n = rng.random_range(m.transcript_min..=m.transcript_max);
                let tokens: Vec<usize> = (0..n).map(|_| FIRST_TOKEN + rng.random_range(0..m.vocab_size)).collect();
                render(&templates, &tokens, Some((&noise, &mut rng)))
            })
            .collect()
    };
    let train = make(m.train_utterances)?;
    let dev = make(m.dev_utterances)?;
    let test = make(m.test_utterances)?;
    Ok(Dataset {
        templates,
        train,
        dev,
        test,
    })
}
