//! Dense f64 tensor engine with reverse-mode differentiation.
//!
//! The engine records a dynamic trace (`Tape`) per forward pass. Every op
//! pushes a node holding its value and a backward closure; `backward` walks
//! the trace in reverse creation order and accumulates gradients. Parameters
//! enter a tape through [`Tape::param`], which leases the values under a
//! unique name so the caller can read the gradients back out afterwards.
//!
//! Only ranks 0..=2 appear in practice; scalars are shape `[1]`.

mod adam;
mod gradcheck;
mod ops;

pub use adam::{AdamHyper, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Self {
        let n = values.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param {
            values,
            shape,
            grad: vec![0.0; n],
        }
    }
}

/// All parameters of a model, keyed by unique dotted-path name.
/// `BTreeMap` keeps iteration (and serialization) lexicographic.
#[derive(Clone, Default, Debug)]
pub struct ParamSet {
    pub params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>, shape: Vec<usize>) {
        let name = name.into();
        debug_assert!(!self.params.contains_key(&name), "duplicate param {name}");
        self.params.insert(name, Param::new(values, shape));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` (keyed by name) into the per-parameter accumulators.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.grad.len() {
                return Err(Error::dim("accumulate", format!("{name} gradient length")));
            }
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
        Ok(())
    }

    pub fn check_grads_finite(&self) -> Result<()> {
        for (name, p) in &self.params {
            if !p.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }
}

/// Handle to a value on a [`Tape`]. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var {
    pub(crate) id: usize,
    pub shape: Vec<usize>,
}

impl Var {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Context handed to a node's backward closure.
pub(crate) struct Ctx<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a [f64],
    /// This node's forward value.
    pub out: &'a [f64],
    /// Forward values and shapes of the parent nodes, in parent order.
    pub inputs: Vec<(&'a [f64], &'a [usize])>,
}

type BackwardFn = Box<dyn Fn(&Ctx) -> Vec<Vec<f64>>>;

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records one forward pass. Not thread-safe; build one tape per sample.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leases: RefCell<BTreeMap<String, usize>>,
    grads: RefCell<Vec<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = backward.is_some();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            shape: shape.clone(),
            parents,
            backward,
            requires_grad,
        });
        Var { id, shape }
    }

    /// A constant (non-differentiable) tensor.
    pub fn constant(&self, value: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if value.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(
                "constant",
                format!("data length {} vs shape {:?}", value.len(), shape),
            ));
        }
        Ok(self.push(value, shape, vec![], None))
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.push(vec![value], vec![1], vec![], None)
    }

    /// Leases named parameter values onto the tape. Repeated leases of the
    /// same name return the same node so gradients accumulate in one place.
    pub fn param(&self, name: &str, values: &[f64], shape: &[usize]) -> Result<Var> {
        if let Some(&id) = self.leases.borrow().get(name) {
            return Ok(Var {
                id,
                shape: shape.to_vec(),
            });
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(
                "param",
                format!("{name}: data length {} vs shape {:?}", values.len(), shape),
            ));
        }
        let var = self.push(values.to_vec(), shape.to_vec(), vec![], None);
        self.nodes.borrow_mut()[var.id].requires_grad = true;
        self.leases.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    pub fn value(&self, v: &Var) -> Vec<f64> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn scalar_value(&self, v: &Var) -> f64 {
        self.nodes.borrow()[v.id].value[0]
    }

    /// Errors if any element of `v` is NaN or infinite.
    pub fn check_finite(&self, v: &Var, what: &str) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[v.id].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates per-node gradients,
    /// readable via [`Tape::grad`] / [`Tape::param_grads`].
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let nodes = self.nodes.borrow();
        // gradient buffers are allocated lazily: an empty Vec means the sweep
        // has not reached that node (gradient identically zero)
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
        grads[loss.id] = vec![1.0];
        for i in (0..=loss.id).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let node = &nodes[i];
            let Some(bw) = &node.backward else { continue };
            let g = std::mem::take(&mut grads[i]);
            let ctx = Ctx {
                grad: &g,
                out: &node.value,
                inputs: node
                    .parents
                    .iter()
                    .map(|&p| (nodes[p].value.as_slice(), nodes[p].shape.as_slice()))
                    .collect(),
            };
            let contribs = bw(&ctx);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&p, c) in node.parents.iter().zip(contribs) {
                debug_assert_eq!(c.len(), nodes[p].value.len());
                if grads[p].is_empty() {
                    grads[p] = c;
                } else {
                    for (dst, src) in grads[p].iter_mut().zip(c) {
                        *dst += src;
                    }
                }
            }
            grads[i] = g;
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `v` (zeros if unreached).
    pub fn grad(&self, v: &Var) -> Vec<f64> {
        let grads = self.grads.borrow();
        if v.id < grads.len() && !grads[v.id].is_empty() {
            grads[v.id].clone()
        } else {
            vec![0.0; v.len()]
        }
    }

    /// Gradients of all leased parameters, keyed by lease name. Parameters
    /// the sweep never reached get explicit zero buffers.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let grads = self.grads.borrow();
        self.leases
            .borrow()
            .iter()
            .map(|(name, &id)| {
                let g = if id < grads.len() && !grads[id].is_empty() {
                    grads[id].clone()
                } else {
                    vec![0.0; self.nodes.borrow()[id].value.len()]
                };
                (name.clone(), g)
            })
            .collect()
    }

    /// Like [`Tape::param_grads`], but moves the buffers out of the tape and
    /// omits parameters the sweep never reached (gradient identically zero).
    pub fn take_param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut grads = self.grads.borrow_mut();
        self.leases
            .borrow()
            .iter()
            .filter_map(|(name, &id)| {
                if id < grads.len() && !grads[id].is_empty() {
                    Some((name.clone(), std::mem::take(&mut grads[id])))
                } else {
                    None
                }
            })
            .collect()
    }
}
