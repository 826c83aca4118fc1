//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in execution order, so the record is topologically sorted by
//! construction and the backward sweep is a single reverse scan.
//!
//! ```
//! use plrn_core::autodiff::Tape;
//! use plrn_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.input(Tensor::column(vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
pub mod gradcheck;
pub(crate) mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Conv1d {
        x: Var,
        kernels: Var,
    },
    Sum(Var),
    Transpose(Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    SelectCol {
        input: Var,
        col: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherCols {
        table: Var,
        indices: Vec<usize>,
    },
    MaskCols {
        input: Var,
        mask: Vec<bool>,
    },
    SmoothL1(Var),
    LogFloor {
        input: Var,
        floor: f64,
    },
    Dot {
        input: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Ordered record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Places a trainable parameter on the tape. Repeated requests for the
    /// same parameter return the same node, so gradients from every use
    /// accumulate there.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&var) = self.params.get(&id) {
            return var;
        }
        let var = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, var);
        var
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, var: Var) -> &Node {
        &self.nodes[var.0]
    }

    pub(crate) fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse sweep from a scalar root with seed gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_scaled(root, 1.0)
    }

    /// Reverse sweep with seed gradient `seed`; used to fold a batch mean
    /// into per-sample passes.
    pub fn backward_scaled(&self, root: Var, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        backward::run(self, root, seed)
    }

    /// Runs backward and adds the parameter gradients into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.backward(root)?;
        grads.accumulate_into(store, 1.0);
        Ok(())
    }
}

/// Per-node gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Tensor::new(self.shapes[var.0].clone(), g.clone()).ok()
    }

    /// Gradient buffers of every parameter reached by the sweep, in tape
    /// order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, idx)| self.grads[idx].as_deref().map(|g| (id, g)))
    }

    pub fn into_param_grads(mut self) -> ParamGrads {
        let mut out = Vec::with_capacity(self.params.len());
        for &(id, idx) in &self.params {
            if let Some(g) = self.grads[idx].take() {
                out.push((id, g));
            }
        }
        ParamGrads(out)
    }

    pub fn accumulate_into(&self, store: &mut ParameterStore, scale: f64) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g, scale);
        }
    }
}

/// Detached parameter gradients of one sample, for ordered reduction.
#[derive(Debug, Default, Clone)]
pub struct ParamGrads(pub Vec<(ParamId, Vec<f64>)>);

impl ParamGrads {
    pub fn accumulate_into(&self, store: &mut ParameterStore, scale: f64) {
        for (id, g) in &self.0 {
            store.accumulate_grad(*id, g, scale);
        }
    }
}
