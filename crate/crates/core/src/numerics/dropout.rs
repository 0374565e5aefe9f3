use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Inverted dropout: kept activations are scaled by `1/(1-rate)` so inference needs no rescale.
/// Without an rng it is the identity.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        if rate <= 0.0 {
            return Dropout::disabled();
        }
        Dropout {
            rate,
            rng: Some(RefCell::new(rng)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let Some(rng) = &self.rng else {
            return Ok(x.clone());
        };
        let keep = 1.0 - self.rate;
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> = (0..x.value().numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::from_parts(x.shape().to_vec(), mask));
        tape.mul(x, &mask)
    }
}
