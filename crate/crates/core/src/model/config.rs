//! Model and training hyperparameters, stored as flat `key=value` text.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::NoamSchedule;

/// Reserved token ids. Real tokens start at [`FIRST_TOKEN`].
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const FIRST_TOKEN: usize = 3;

/// Where the text encoder's input comes from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextInput {
    /// Greedy first-pass predictions, detached from the graph.
    Greedy,
    /// The reference transcript.
    Truth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_input: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Output classes including PAD/BOS/EOS.
    pub vocab_size: usize,
    pub online_encoder_layers: usize,
    pub online_decoder_layers: usize,
    pub full_encoder_layers: usize,
    pub text_encoder_layers: usize,
    pub full_decoder_layers: usize,
    /// Look-back order `L` of the unidirectional memory blocks in the online encoder and decoder.
    pub fsmn_order_online: usize,
    /// Look-back order of the target-side memory block in the second-pass decoder.
    pub fsmn_order_full_decoder: usize,
    /// Look-back and look-ahead orders of the full-sequence and text encoder memory blocks.
    pub fsmn_left_offline: usize,
    pub fsmn_right_offline: usize,
    pub chunk_sizes: Vec<usize>,
    pub n_max: usize,
    pub predictor_hidden: usize,
    pub stride_kernel: usize,
    pub stride: usize,
    pub alpha: f64,
    pub lambda_offline: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub frame_period_ms: f64,
    pub use_text_encoder: bool,
    pub text_input: TextInput,
    pub noam_k: f64,
    pub noam_d_model: f64,
    pub noam_warmup: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub eval_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_input: 8,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            vocab_size: FIRST_TOKEN + 32,
            online_encoder_layers: 2,
            online_decoder_layers: 1,
            full_encoder_layers: 1,
            text_encoder_layers: 1,
            full_decoder_layers: 1,
            fsmn_order_online: 4,
            fsmn_order_full_decoder: 10,
            fsmn_left_offline: 24,
            fsmn_right_offline: 2,
            chunk_sizes: vec![2, 4, 8],
            n_max: 6,
            predictor_hidden: 32,
            stride_kernel: 5,
            stride: 2,
            alpha: 0.1,
            lambda_offline: 1.0,
            label_smoothing: 0.1,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            frame_period_ms: 60.0,
            use_text_encoder: true,
            text_input: TextInput::Greedy,
            noam_k: 4.0,
            noam_d_model: 512.0,
            noam_warmup: 8000.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            eval_every: 500,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got `{value}`"))),
    }
}

impl ModelConfig {
    /// The tiny configuration used by gradient checks: width 4, one layer everywhere.
    pub fn micro() -> Self {
        ModelConfig {
            d_input: 3,
            d_model: 4,
            heads: 2,
            d_ff: 8,
            vocab_size: FIRST_TOKEN + 4,
            online_encoder_layers: 1,
            online_decoder_layers: 1,
            full_encoder_layers: 1,
            text_encoder_layers: 1,
            full_decoder_layers: 1,
            fsmn_order_online: 2,
            fsmn_order_full_decoder: 3,
            fsmn_left_offline: 2,
            fsmn_right_offline: 1,
            chunk_sizes: vec![2],
            n_max: 3,
            predictor_hidden: 4,
            ..ModelConfig::default()
        }
    }

    pub fn schedule(&self) -> NoamSchedule {
        NoamSchedule {
            k: self.noam_k,
            d_model: self.noam_d_model,
            warmup: self.noam_warmup,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.vocab_size - FIRST_TOKEN
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_input", self.d_input),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("online_encoder_layers", self.online_encoder_layers),
            ("online_decoder_layers", self.online_decoder_layers),
            ("full_decoder_layers", self.full_decoder_layers),
            ("fsmn_order_online", self.fsmn_order_online),
            ("fsmn_order_full_decoder", self.fsmn_order_full_decoder),
            ("fsmn_left_offline", self.fsmn_left_offline),
            ("n_max", self.n_max),
            ("predictor_hidden", self.predictor_hidden),
            ("stride", self.stride),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config("heads", format!("d_model {} not divisible by {}", self.d_model, self.heads)));
        }
        if self.vocab_size <= FIRST_TOKEN {
            return Err(Error::config("vocab_size", format!("needs more than {FIRST_TOKEN} reserved ids")));
        }
        if self.stride_kernel.is_multiple_of(2) {
            return Err(Error::config("stride_kernel", "must be odd"));
        }
        if self.stride_kernel < self.stride {
            return Err(Error::config("stride_kernel", "must be at least the stride"));
        }
        if self.chunk_sizes.is_empty() {
            return Err(Error::config("chunk_sizes", "must not be empty"));
        }
        if self.chunk_sizes.contains(&0) {
            return Err(Error::config("chunk_sizes", "every size must be at least 1"));
        }
        let mut sorted = self.chunk_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.chunk_sizes.len() {
            return Err(Error::config("chunk_sizes", "duplicate size"));
        }
        for (field, v) in [("alpha", self.alpha), ("lambda_offline", self.lambda_offline)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and nonnegative"));
            }
        }
        for (field, v) in [("label_smoothing", self.label_smoothing), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::config("layer_norm_eps", "must be positive"));
        }
        if self.frame_period_ms <= 0.0 {
            return Err(Error::config("frame_period_ms", "must be positive"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            writeln!(s, "{k}={v}").expect("write to string");
        };
        put("d_input", self.d_input.to_string());
        put("d_model", self.d_model.to_string());
        put("heads", self.heads.to_string());
        put("d_ff", self.d_ff.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("online_encoder_layers", self.online_encoder_layers.to_string());
        put("online_decoder_layers", self.online_decoder_layers.to_string());
        put("full_encoder_layers", self.full_encoder_layers.to_string());
        put("text_encoder_layers", self.text_encoder_layers.to_string());
        put("full_decoder_layers", self.full_decoder_layers.to_string());
        put("fsmn_order_online", self.fsmn_order_online.to_string());
        put("fsmn_order_full_decoder", self.fsmn_order_full_decoder.to_string());
        put("fsmn_left_offline", self.fsmn_left_offline.to_string());
        put("fsmn_right_offline", self.fsmn_right_offline.to_string());
        put(
            "chunk_sizes",
            self.chunk_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        put("n_max", self.n_max.to_string());
        put("predictor_hidden", self.predictor_hidden.to_string());
        put("stride_kernel", self.stride_kernel.to_string());
        put("stride", self.stride.to_string());
        put("alpha", self.alpha.to_string());
        put("lambda_offline", self.lambda_offline.to_string());
        put("label_smoothing", self.label_smoothing.to_string());
        put("dropout", self.dropout.to_string());
        put("layer_norm_eps", self.layer_norm_eps.to_string());
        put("frame_period_ms", self.frame_period_ms.to_string());
        put("use_text_encoder", self.use_text_encoder.to_string());
        put(
            "text_input",
            match self.text_input {
                TextInput::Greedy => "greedy",
                TextInput::Truth => "truth",
            }
            .to_string(),
        );
        put("noam_k", self.noam_k.to_string());
        put("noam_d_model", self.noam_d_model.to_string());
        put("noam_warmup", self.noam_warmup.to_string());
        put("adam_beta1", self.adam_beta1.to_string());
        put("adam_beta2", self.adam_beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("eval_every", self.eval_every.to_string());
        s
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "d_input" => c.d_input = parse_num(key, value)?,
                "d_model" => c.d_model = parse_num(key, value)?,
                "heads" => c.heads = parse_num(key, value)?,
                "d_ff" => c.d_ff = parse_num(key, value)?,
                "vocab_size" => c.vocab_size = parse_num(key, value)?,
                "online_encoder_layers" => c.online_encoder_layers = parse_num(key, value)?,
                "online_decoder_layers" => c.online_decoder_layers = parse_num(key, value)?,
                "full_encoder_layers" => c.full_encoder_layers = parse_num(key, value)?,
                "text_encoder_layers" => c.text_encoder_layers = parse_num(key, value)?,
                "full_decoder_layers" => c.full_decoder_layers = parse_num(key, value)?,
                "fsmn_order_online" => c.fsmn_order_online = parse_num(key, value)?,
                "fsmn_order_full_decoder" => c.fsmn_order_full_decoder = parse_num(key, value)?,
                "fsmn_left_offline" => c.fsmn_left_offline = parse_num(key, value)?,
                "fsmn_right_offline" => c.fsmn_right_offline = parse_num(key, value)?,
                "chunk_sizes" => {
                    c.chunk_sizes = value
                        .split(',')
                        .map(|v| parse_num(key, v.trim()))
                        .collect::<Result<_>>()?
                }
                "n_max" => c.n_max = parse_num(key, value)?,
                "predictor_hidden" => c.predictor_hidden = parse_num(key, value)?,
                "stride_kernel" => c.stride_kernel = parse_num(key, value)?,
                "stride" => c.stride = parse_num(key, value)?,
                "alpha" => c.alpha = parse_num(key, value)?,
                "lambda_offline" => c.lambda_offline = parse_num(key, value)?,
                "label_smoothing" => c.label_smoothing = parse_num(key, value)?,
                "dropout" => c.dropout = parse_num(key, value)?,
                "layer_norm_eps" => c.layer_norm_eps = parse_num(key, value)?,
                "frame_period_ms" => c.frame_period_ms = parse_num(key, value)?,
                "use_text_encoder" => c.use_text_encoder = parse_bool(key, value)?,
                "text_input" => {
                    c.text_input = match value {
                        "greedy" => TextInput::Greedy,
                        "truth" => TextInput::Truth,
                        _ => return Err(Error::config(key, format!("expected greedy/truth, got `{value}`"))),
                    }
                }
                "noam_k" => c.noam_k = parse_num(key, value)?,
                "noam_d_model" => c.noam_d_model = parse_num(key, value)?,
                "noam_warmup" => c.noam_warmup = parse_num(key, value)?,
                "adam_beta1" => c.adam_beta1 = parse_num(key, value)?,
                "adam_beta2" => c.adam_beta2 = parse_num(key, value)?,
                "adam_eps" => c.adam_eps = parse_num(key, value)?,
                "batch_size" => c.batch_size = parse_num(key, value)?,
                "eval_every" => c.eval_every = parse_num(key, value)?,
                _ => return Err(Error::config(key, "unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }
}
