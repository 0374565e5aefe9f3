//! Reverse-mode differentiation tape.
//!
//! Operations are methods on [`Tape`] (see `ops.rs`). Each one computes its value eagerly and,
//! when gradients are enabled and at least one operand is tracked, appends a record holding a
//! vector-Jacobian closure. Records are appended in execution order, so the record list is
//! topologically sorted and a single reverse sweep visits each record once.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Vector-Jacobian product: upstream gradient plus per-operand "needs grad" flags in, one
/// optional gradient per operand out.
pub(crate) type Vjp = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Record {
    parents: Vec<Option<usize>>,
    vjp: Option<Vjp>,
}

pub struct Tape {
    id: u64,
    grad_enabled: bool,
    records: RefCell<Vec<Record>>,
    consumed: Cell<bool>,
}

/// A tensor living on a tape. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
    tape: u64,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var {
            value: Rc::clone(&self.value),
            node: None,
            tape: self.tape,
        }
    }
}

/// Gradients of leaf variables produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|n| self.by_node.get(&n))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled: true,
            records: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A tape that never records: every result is a constant.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input: gradients are collected for it.
    pub fn leaf(&self, value: Tensor) -> Var {
        if !self.grad_enabled {
            return self.constant(value);
        }
        let mut recs = self.records.borrow_mut();
        recs.push(Record {
            parents: Vec::new(),
            vjp: None,
        });
        Var {
            value: Rc::new(value),
            node: Some(recs.len() - 1),
            tape: self.id,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
            tape: self.id,
        }
    }

    pub(crate) fn record(&self, value: Tensor, inputs: &[&Var], vjp: Vjp) -> Var {
        for v in inputs {
            debug_assert!(
                v.node.is_none() || v.tape == self.id,
                "variable from another tape"
            );
        }
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return self.constant(value);
        }
        let mut recs = self.records.borrow_mut();
        recs.push(Record {
            parents: inputs.iter().map(|v| v.node).collect(),
            vjp: Some(vjp),
        });
        Var {
            value: Rc::new(value),
            node: Some(recs.len() - 1),
            tape: self.id,
        }
    }

    /// Propagates d(loss)/d(·) to every tracked leaf reachable from `loss`.
    ///
    /// A tape can be swept once; a second call is a contract error.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if loss.tape != self.id {
            return Err(Error::contract("loss belongs to a different tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::contract("backward already ran on this tape"));
        }
        let Some(root) = loss.node else {
            return Ok(Gradients::default());
        };
        let recs = self.records.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape(), 1.0));
        let mut out = Gradients::default();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let rec = &recs[i];
            let Some(vjp) = &rec.vjp else {
                out.by_node.insert(i, g);
                continue;
            };
            let needs: Vec<bool> = rec.parents.iter().map(Option::is_some).collect();
            let parent_grads = vjp(&g, &needs);
            for (parent, pg) in rec.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else { continue };
                if *p >= i {
                    return Err(Error::contract("tape is not topologically ordered"));
                }
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }
}
