//! Named parameter storage, deterministic initialization and binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::{FeedForwardParams, FsmnTaps, MhaParams, NormParams, SanMLayerParams};
use crate::error::{Error, Result};
use crate::numerics::{Dropout, Tape, Tensor, Var};
use crate::scama::PredictorParams;

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Every parameter the configuration implies, in a fixed order.
pub fn parameter_inventory(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut out = Vec::new();
    let mut put = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    let norm = |put: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        put(format!("{p}.gamma"), vec![d], Init::Ones);
        put(format!("{p}.beta"), vec![d], Init::Zeros);
    };
    let mha = |put: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            put(format!("{p}.{w}"), vec![d, d], Init::FanIn(d));
        }
    };
    let ffn = |put: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        put(format!("{p}.w1"), vec![d, cfg.d_ff], Init::FanIn(d));
        put(format!("{p}.b1"), vec![cfg.d_ff], Init::Zeros);
        put(format!("{p}.w2"), vec![cfg.d_ff, d], Init::FanIn(cfg.d_ff));
        put(format!("{p}.b2"), vec![d], Init::Zeros);
    };
    let san_m = |put: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, left: usize, right: usize| {
        norm(put, &format!("{p}.norm1"));
        mha(put, &format!("{p}.attn"));
        put(format!("{p}.fsmn.left"), vec![left, d], Init::FanIn(left + right));
        if right > 0 {
            put(format!("{p}.fsmn.right"), vec![right, d], Init::FanIn(left + right));
        }
        norm(put, &format!("{p}.norm2"));
        ffn(put, &format!("{p}.ffn"));
    };
    let (lo, ll, lr) = (cfg.fsmn_order_online, cfg.fsmn_left_offline, cfg.fsmn_right_offline);
    let ld = cfg.fsmn_order_full_decoder;

    put("online_encoder.input.weight".into(), vec![cfg.d_input, d], Init::FanIn(cfg.d_input));
    put("online_encoder.input.bias".into(), vec![d], Init::Zeros);
    for i in 0..cfg.online_encoder_layers {
        san_m(&mut put, &format!("online_encoder.layers.{i}"), lo, 0);
    }
    norm(&mut put, "online_encoder.after_norm");

    put("online_decoder.embed".into(), vec![v, d], Init::FanIn(d));
    for i in 0..cfg.online_decoder_layers {
        let p = format!("online_decoder.layers.{i}");
        norm(&mut put, &format!("{p}.norm1"));
        put(format!("{p}.fsmn.left"), vec![lo, d], Init::FanIn(lo));
        norm(&mut put, &format!("{p}.norm2"));
        mha(&mut put, &format!("{p}.cross"));
        norm(&mut put, &format!("{p}.norm3"));
        ffn(&mut put, &format!("{p}.ffn"));
    }
    norm(&mut put, "online_decoder.after_norm");
    put("online_decoder.output.weight".into(), vec![d, v], Init::FanIn(d));
    put("online_decoder.output.bias".into(), vec![v], Init::Zeros);

    for &c in &cfg.chunk_sizes {
        let p = format!("predictor.c{c}");
        put(format!("{p}.w1"), vec![c * d, cfg.predictor_hidden], Init::FanIn(c * d));
        put(format!("{p}.b1"), vec![cfg.predictor_hidden], Init::Zeros);
        put(
            format!("{p}.w2"),
            vec![cfg.predictor_hidden, cfg.n_max + 1],
            Init::FanIn(cfg.predictor_hidden),
        );
        put(format!("{p}.b2"), vec![cfg.n_max + 1], Init::Zeros);
    }

    let conv_in = cfg.stride_kernel * (cfg.d_input + d);
    put("stride_conv.weight".into(), vec![conv_in, d], Init::FanIn(conv_in));
    put("stride_conv.bias".into(), vec![d], Init::Zeros);
    norm(&mut put, "stride_conv.norm");
    for i in 0..cfg.full_encoder_layers {
        san_m(&mut put, &format!("full_encoder.layers.{i}"), ll, lr);
    }
    norm(&mut put, "full_encoder.after_norm");

    put("text_encoder.embed".into(), vec![v, d], Init::FanIn(d));
    for i in 0..cfg.text_encoder_layers {
        san_m(&mut put, &format!("text_encoder.layers.{i}"), ll, lr);
    }
    norm(&mut put, "text_encoder.after_norm");

    put("full_decoder.embed".into(), vec![v, d], Init::FanIn(d));
    for i in 0..cfg.full_decoder_layers {
        let p = format!("full_decoder.layers.{i}");
        norm(&mut put, &format!("{p}.norm1"));
        put(format!("{p}.fsmn.left"), vec![ld, d], Init::FanIn(ld));
        norm(&mut put, &format!("{p}.norm2"));
        mha(&mut put, &format!("{p}.acoustic"));
        mha(&mut put, &format!("{p}.semantic"));
        put(format!("{p}.merge.weight"), vec![2 * d, d], Init::FanIn(2 * d));
        put(format!("{p}.merge.bias"), vec![d], Init::Zeros);
        norm(&mut put, &format!("{p}.norm3"));
        ffn(&mut put, &format!("{p}.ffn"));
    }
    norm(&mut put, "full_decoder.after_norm");
    put("full_decoder.output.weight".into(), vec![d, v], Init::FanIn(d));
    put("full_decoder.output.bias".into(), vec![v], Init::Zeros);
    out
}

/// All model tensors by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that names and shapes match what `cfg` implies.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let inventory = parameter_inventory(cfg);
        if inventory.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "config implies {} tensors, found {}",
                inventory.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in inventory {
            match self.tensors.get(&name) {
                None => return Err(Error::contract(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Dimension {
                        op: "parameter shape",
                        lhs: t.shape().to_vec(),
                        rhs: shape,
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in parameter_inventory(cfg) {
        let n: usize = shape.iter().product();
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect();
                Tensor::new(&shape, data)?
            }
        };
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
    }
    Ok(ModelParams { tensors })
}

/// One forward computation: a tape, the parameters bound onto it on first use, and the
/// dropout source. Training graphs record; inference graphs do not.
pub struct Graph<'a> {
    tape: Tape,
    params: &'a ModelParams,
    config: &'a ModelConfig,
    dropout: Dropout,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Graph<'a> {
    /// `record` selects a gradient-recording tape.
    pub fn new(params: &'a ModelParams, config: &'a ModelConfig, record: bool, dropout: Dropout) -> Self {
        Graph {
            tape: if record { Tape::new() } else { Tape::no_grad() },
            params,
            config,
            dropout,
            bound: RefCell::default(),
        }
    }

    pub fn training(params: &'a ModelParams, config: &'a ModelConfig, dropout_rng: ChaCha8Rng) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            config,
            dropout: Dropout::new(config.dropout, dropout_rng),
            bound: RefCell::default(),
        }
    }

    /// Records gradients but applies no dropout.
    pub fn deterministic(params: &'a ModelParams, config: &'a ModelConfig) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            config,
            dropout: Dropout::disabled(),
            bound: RefCell::default(),
        }
    }

    pub fn inference(params: &'a ModelParams, config: &'a ModelConfig) -> Self {
        Graph {
            tape: Tape::no_grad(),
            params,
            config,
            dropout: Dropout::disabled(),
            bound: RefCell::default(),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn dropout(&self) -> &Dropout {
        &self.dropout
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
        let v = self.tape.leaf(t.clone());
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Gradients of `loss` for every parameter this graph touched.
    pub fn gradients(&self, loss: &Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in self.bound.borrow().iter() {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        Ok(out)
    }

    pub(crate) fn norm(&self, prefix: &str) -> Result<NormParams> {
        Ok(NormParams {
            gamma: self.param(&format!("{prefix}.gamma"))?,
            beta: self.param(&format!("{prefix}.beta"))?,
        })
    }

    pub(crate) fn mha(&self, prefix: &str) -> Result<MhaParams> {
        Ok(MhaParams {
            wq: self.param(&format!("{prefix}.wq"))?,
            wk: self.param(&format!("{prefix}.wk"))?,
            wv: self.param(&format!("{prefix}.wv"))?,
            wo: self.param(&format!("{prefix}.wo"))?,
        })
    }

    pub(crate) fn ffn(&self, prefix: &str) -> Result<FeedForwardParams> {
        Ok(FeedForwardParams {
            w1: self.param(&format!("{prefix}.w1"))?,
            b1: self.param(&format!("{prefix}.b1"))?,
            w2: self.param(&format!("{prefix}.w2"))?,
            b2: self.param(&format!("{prefix}.b2"))?,
        })
    }

    pub(crate) fn san_m(&self, prefix: &str, bidirectional: bool) -> Result<SanMLayerParams> {
        let right = format!("{prefix}.fsmn.right");
        Ok(SanMLayerParams {
            heads: self.config.heads,
            norm_eps: self.config.layer_norm_eps,
            norm1: self.norm(&format!("{prefix}.norm1"))?,
            attn: self.mha(&format!("{prefix}.attn"))?,
            fsmn: FsmnTaps {
                left: self.param(&format!("{prefix}.fsmn.left"))?,
                right: if bidirectional && self.params.get(&right).is_some() {
                    Some(self.param(&right)?)
                } else {
                    None
                },
            },
            norm2: self.norm(&format!("{prefix}.norm2"))?,
            ffn: self.ffn(&format!("{prefix}.ffn"))?,
        })
    }

    pub(crate) fn predictor(&self, chunk_size: usize) -> Result<PredictorParams> {
        if !self.config.chunk_sizes.contains(&chunk_size) {
            return Err(Error::config(
                "chunk_size",
                format!("{chunk_size} is not among the trained sizes {:?}", self.config.chunk_sizes),
            ));
        }
        let p = format!("predictor.c{chunk_size}");
        Ok(PredictorParams {
            w1: self.param(&format!("{p}.w1"))?,
            b1: self.param(&format!("{p}.b1"))?,
            w2: self.param(&format!("{p}.w2"))?,
            b2: self.param(&format!("{p}.b2"))?,
        })
    }

    /// `x W + b` with `{prefix}.weight` / `{prefix}.bias`.
    pub(crate) fn linear(&self, x: &Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.add_bias(&self.tape.matmul(x, &w)?, &b)
    }

    pub(crate) fn layer_norm(&self, x: &Var, prefix: &str) -> Result<Var> {
        let p = self.norm(prefix)?;
        self.tape.layer_norm(x, &p.gamma, &p.beta, self.config.layer_norm_eps)
    }

    /// Embedding lookup of token ids.
    pub(crate) fn embed(&self, table: &str, tokens: &[usize]) -> Result<Var> {
        let e = self.param(table)?;
        let v = e.shape()[0];
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: v,
            });
        }
        let idx: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
        self.tape.gather_rows(&e, &idx)
    }
}
