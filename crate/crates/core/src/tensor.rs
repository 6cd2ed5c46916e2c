//! Dense NCHW tensors with reverse-mode differentiation.
//!
//! Every tensor is an immutable 4-D buffer of `f64`. Tensors that take part in
//! differentiation carry a [`GradSlot`]: leaves (parameters) own a gradient
//! accumulator, while op outputs own a [`Node`] that remembers its inputs and
//! a backward rule. Slots are numbered from a global counter at creation, so
//! sorting the reachable nodes by id yields the order in which they were
//! appended during the forward pass. Walking that list in reverse visits every
//! node after all of its consumers, which is all backward needs.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule of a recorded op: maps the gradient of the op output to one
/// optional gradient per input. An entry may be `None` only for inputs that do
/// not require a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Node {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

pub(crate) struct GradSlot {
    id: u64,
    node: Option<Node>,
    grad: Mutex<Option<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
    slot: Option<Arc<GradSlot>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .finish()
    }
}

impl Tensor {
    /// Constant tensor; panics if `data.len()` disagrees with `shape`.
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        Self::try_new(shape, data).expect("tensor data length must equal shape product")
    }

    pub fn try_new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            slot: None,
        })
    }

    /// Learnable leaf tensor.
    pub fn param(shape: Shape, data: Vec<f64>) -> Self {
        Self::new(shape, data).into_param()
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, vec![0.0; numel(&shape)])
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self::new(shape, vec![value; numel(&shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new([1, 1, 1, 1], vec![value])
    }

    /// Turns this tensor into a fresh leaf that requires a gradient. The data
    /// buffer is shared, any graph history is dropped.
    pub fn into_param(self) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data,
            slot: Some(Arc::new(GradSlot {
                id: next_id(),
                node: None,
                grad: Mutex::new(None),
            })),
        }
    }

    /// Records the output of a differentiable op. The node is only created if
    /// at least one input requires a gradient.
    pub(crate) fn from_op(
        shape: Shape,
        data: impl Into<Arc<Vec<f64>>>,
        op: &'static str,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let data = data.into();
        debug_assert_eq!(data.len(), numel(&shape));
        let slot = if inputs.iter().any(Tensor::requires_grad) {
            Some(Arc::new(GradSlot {
                id: next_id(),
                node: Some(Node {
                    op,
                    inputs,
                    backward,
                }),
                grad: Mutex::new(None),
            }))
        } else {
            None
        };
        Tensor { shape, data, slot }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on a tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.slot.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.slot.as_ref().is_none_or(|s| s.node.is_none())
    }

    /// Name of the op that produced this tensor, if it is on the graph.
    pub fn op_name(&self) -> Option<&'static str> {
        self.slot
            .as_ref()
            .and_then(|s| s.node.as_ref())
            .map(|n| n.op)
    }

    /// Accumulated gradient of a leaf. `None` if backward never reached it or
    /// the gradient has been cleared.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.slot
            .as_ref()
            .and_then(|s| s.grad.lock().expect("grad lock poisoned").clone())
    }

    pub fn zero_grad(&self) {
        if let Some(slot) = &self.slot {
            *slot.grad.lock().expect("grad lock poisoned") = None;
        }
    }

    /// Same values, no graph history, never receives a gradient.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            slot: None,
        }
    }

    /// Copies channel `c` of every batch item into a `(N, 1, H, W)` constant.
    pub fn channel(&self, c: usize) -> Tensor {
        let [n, ch, h, w] = self.shape;
        assert!(c < ch, "channel {c} out of range for {:?}", self.shape);
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for b in 0..n {
            let start = (b * ch + c) * plane;
            out.extend_from_slice(&self.data[start..start + plane]);
        }
        Tensor::new([n, 1, h, w], out)
    }

    /// Copies channels `[start, end)` of every batch item into a constant.
    pub fn channels(&self, start: usize, end: usize) -> Tensor {
        let [n, ch, h, w] = self.shape;
        assert!(
            start < end && end <= ch,
            "channel range {start}..{end} invalid for {:?}",
            self.shape
        );
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            out.extend_from_slice(&self.data[(b * ch + start) * plane..(b * ch + end) * plane]);
        }
        Tensor::new([n, end - start, h, w], out)
    }

    /// Runs reverse-mode differentiation from this scalar, accumulating
    /// `d(self)/d(leaf)` into every reachable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape
            )));
        }
        let Some(root) = &self.slot else {
            return Err(Error::Contract(
                "backward on a tensor that is not on the graph".into(),
            ));
        };
        if root.node.is_none() {
            accumulate(root, vec![1.0]);
            return Ok(());
        }
        GradTape::from_root(self).run(vec![1.0]);
        Ok(())
    }
}

fn accumulate(slot: &GradSlot, g: Vec<f64>) {
    let mut guard = slot.grad.lock().expect("grad lock poisoned");
    match guard.as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *guard = Some(g),
    }
}

/// Ordered list of the recorded ops reachable from a root, in append order.
pub struct GradTape {
    entries: Vec<Tensor>,
}

impl GradTape {
    pub fn from_root(root: &Tensor) -> Self {
        Self::from_roots(std::slice::from_ref(root))
    }

    /// Union of the ops reachable from any of `roots`.
    pub fn from_roots(roots: &[Tensor]) -> Self {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = roots.to_vec();
        while let Some(t) = stack.pop() {
            let Some(slot) = &t.slot else { continue };
            let Some(node) = &slot.node else { continue };
            if !seen.insert(slot.id) {
                continue;
            }
            stack.extend(node.inputs.iter().filter(|i| !i.is_leaf()).cloned());
            entries.push(t);
        }
        entries.sort_by_key(|t| t.slot.as_ref().map(|s| s.id));
        GradTape { entries }
    }

    /// Number of recorded ops.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of `f64` values held by recorded op outputs. A proxy for
    /// the activation memory a backward pass keeps alive.
    pub fn activation_floats(&self) -> usize {
        self.entries.iter().map(Tensor::numel).sum()
    }

    /// Op names in append order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.entries.iter().filter_map(Tensor::op_name).collect()
    }

    fn run(self, seed: Vec<f64>) {
        let Some(last) = self.entries.last() else {
            return;
        };
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(slot_id(last), seed);
        for t in self.entries.iter().rev() {
            let slot = t.slot.as_ref().expect("tape entries are graph nodes");
            let Some(g) = pending.remove(&slot.id) else {
                continue;
            };
            let node = slot.node.as_ref().expect("tape entries are graph nodes");
            let grads = (node.backward)(&g, &node.inputs);
            debug_assert_eq!(grads.len(), node.inputs.len());
            for (input, gi) in node.inputs.iter().zip(grads) {
                let (Some(islot), Some(gi)) = (&input.slot, gi) else {
                    continue;
                };
                debug_assert_eq!(gi.len(), input.numel(), "gradient shape from {}", node.op);
                if islot.node.is_none() {
                    accumulate(islot, gi);
                } else {
                    match pending.get_mut(&islot.id) {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(islot.id, gi);
                        }
                    }
                }
            }
        }
    }
}

fn slot_id(t: &Tensor) -> u64 {
    t.slot.as_ref().map(|s| s.id).unwrap_or(u64::MAX)
}
