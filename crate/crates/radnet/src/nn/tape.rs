//! The recording tape: tensor handles, graph nodes, and the backward pass.
//!
//! A [`Tape`] owns an append-only list of nodes. Every differentiable
//! operation pushes one node whose closure scatters the incoming gradient to
//! its parents. Handles ([`T`]) are cheap to clone: an `Rc` to the value plus
//! the node index. Operations on values that do not require gradient (or on a
//! tape with gradient recording disabled) push nothing, so inference runs
//! through the same code without building a graph.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::IxDyn;

use crate::error::{Error, Result};

/// The tensor type used throughout the engine.
pub type Arr = ndarray::ArrayD<f64>;

/// Gradient sink: `(parent node id, contribution)`.
pub type Sink<'a> = dyn FnMut(usize, Arr) + 'a;

type BackwardFn = Box<dyn Fn(&Arr, &mut Sink)>;

struct Node {
    /// `None` for parameter leaves.
    backward: Option<BackwardFn>,
}

static TAPE_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// A tensor handle: the value plus (optionally) its node on the tape.
#[derive(Clone)]
pub struct T {
    pub v: Rc<Arr>,
    pub(crate) node: Option<usize>,
    pub(crate) tape_id: u64,
}

impl T {
    /// A handle with no graph attachment.
    pub fn constant(v: Arr) -> T {
        T { v: Rc::new(v), node: None, tape_id: 0 }
    }

    pub fn shape(&self) -> &[usize] {
        self.v.shape()
    }

    pub fn ndim(&self) -> usize {
        self.v.ndim()
    }

    /// The scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.v.len(), 1, "item() on tensor with {} elements", self.v.len());
        *self.v.first().expect("item() on empty tensor")
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|x| x.is_finite())
    }
}

impl std::fmt::Debug for T {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("T").field("shape", &self.v.shape()).field("node", &self.node).finish()
    }
}

/// Records the computation graph and replays it backwards.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Parameter leaves: node id and the name they were bound under.
    param_nodes: RefCell<Vec<(usize, String)>>,
    /// Name to leaf node, so rebinding a parameter reuses its node and the
    /// gradients from every use site accumulate instead of clobbering.
    param_lookup: RefCell<HashMap<String, usize>>,
    enabled: Cell<bool>,
    id: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records gradients.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(Vec::new()),
            param_lookup: RefCell::new(HashMap::new()),
            enabled: Cell::new(true),
            id: TAPE_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
        }
    }

    /// A tape that never records; every operation returns plain values.
    pub fn inference() -> Tape {
        let t = Tape::new();
        t.enabled.set(false);
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.enabled.get()
    }

    pub fn set_grad_enabled(&self, on: bool) {
        self.enabled.set(on);
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Wraps a value as a non-differentiable input.
    pub fn constant(&self, v: Arr) -> T {
        T::constant(v)
    }

    pub fn constant_rc(&self, v: Rc<Arr>) -> T {
        T { v, node: None, tape_id: 0 }
    }

    /// Binds a named parameter as a differentiable leaf. With recording off
    /// the handle is a plain constant.
    pub fn param(&self, name: &str, value: Rc<Arr>) -> T {
        if !self.enabled.get() {
            return T { v: value, node: None, tape_id: 0 };
        }
        if let Some(&id) = self.param_lookup.borrow().get(name) {
            return T { v: value, node: Some(id), tape_id: self.id };
        }
        let id = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { backward: None });
            nodes.len() - 1
        };
        self.param_nodes.borrow_mut().push((id, name.to_owned()));
        self.param_lookup.borrow_mut().insert(name.to_owned(), id);
        T { v: value, node: Some(id), tape_id: self.id }
    }

    /// Node id of a handle if it belongs to this tape and recording is on.
    pub(crate) fn node_of(&self, t: &T) -> Option<usize> {
        match t.node {
            Some(n) => {
                assert_eq!(t.tape_id, self.id, "tensor used with a different tape");
                Some(n)
            }
            None => None,
        }
    }

    pub(crate) fn record(&self, v: Arr, backward: BackwardFn) -> T {
        debug_assert!(self.enabled.get());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { backward: Some(backward) });
        T { v: Rc::new(v), node: Some(nodes.len() - 1), tape_id: self.id }
    }

    /// Runs the backward pass from a scalar root and returns per-node
    /// gradients for the parameter leaves reachable from it.
    pub fn backward(&self, root: &T) -> Result<Gradients> {
        let root_id = self.node_of(root).ok_or_else(|| {
            Error::Internal("backward from a tensor with no graph attachment".into())
        })?;
        if root.v.len() != 1 {
            return Err(Error::Internal(format!(
                "backward root must be scalar, got shape {:?}",
                root.v.shape()
            )));
        }
        if !root.is_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[root_id] = Some(Arr::ones(root.v.raw_dim()));
        for id in (0..=root_id).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else {
                continue; // parameter leaf keeps its accumulated gradient
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            bw(&g, &mut |pid: usize, contrib: Arr| {
                debug_assert!(pid < id, "gradient flowing forward on the tape");
                match &mut grads[pid] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), contrib.shape());
                        *acc += &contrib;
                    }
                    slot => *slot = Some(contrib),
                }
            });
        }
        let mut by_name = HashMap::new();
        for (id, name) in self.param_nodes.borrow().iter() {
            if let Some(g) = grads[*id].take() {
                by_name.insert(name.clone(), g);
            }
        }
        Ok(Gradients { by_name })
    }
}

/// Gradients keyed by parameter name, as produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_name: HashMap<String, Arr>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.by_name.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    /// Euclidean norm over all gradients together. Summation runs in name
    /// order so the result never depends on map iteration order.
    pub fn global_norm(&self) -> f64 {
        let mut names: Vec<&String> = self.by_name.keys().collect();
        names.sort_unstable();
        names
            .iter()
            .map(|n| self.by_name[n.as_str()].iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient so the global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.by_name.values_mut() {
                g.mapv_inplace(|x| x * s);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.by_name.values().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// A 0-d scalar tensor.
pub fn scalar(v: f64) -> Arr {
    Arr::from_elem(IxDyn(&[]), v)
}
