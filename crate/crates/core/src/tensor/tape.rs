use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{bytes_of, Element, MemoryMeter, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Recording,
    /// Forward values only: no nodes, no gradient buffers.
    Suspended,
}

/// Handle of a tensor's producing node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    tape: u64,
    generation: u64,
    index: usize,
}

impl NodeRef {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Element>: Send + Sync {
    /// Gradients for each input given the gradient of the output. `None`
    /// means the input receives nothing (constant input or zero gradient).
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>>;

    /// Bytes held for the backward pass beyond the inputs themselves.
    fn saved_bytes(&self) -> usize {
        0
    }
}

struct Node<T: Element> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: Box<dyn Backward<T>>,
    bytes: usize,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so every input node precedes the
/// node that consumes it.
pub struct Tape<T: Element> {
    id: u64,
    generation: Cell<u64>,
    mode: Cell<Mode>,
    nodes: RefCell<Vec<Node<T>>>,
    meter: MemoryMeter,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_meter(MemoryMeter::new())
    }

    pub fn with_meter(meter: MemoryMeter) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            generation: Cell::new(0),
            mode: Cell::new(Mode::Recording),
            nodes: RefCell::new(Vec::new()),
            meter,
        }
    }

    pub fn suspended() -> Self {
        let t = Self::new();
        t.set_mode(Mode::Suspended);
        t
    }

    pub fn mode(&self) -> Mode {
        self.mode.get()
    }

    pub fn set_mode(&self, mode: Mode) {
        self.mode.set(mode);
    }

    pub fn is_recording(&self) -> bool {
        self.mode.get() == Mode::Recording
    }

    pub fn meter(&self) -> &MemoryMeter {
        &self.meter
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op names in recording order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Bytes charged to the meter by each node (output plus saved state).
    pub fn node_bytes(&self) -> Vec<(&'static str, usize)> {
        self.nodes.borrow().iter().map(|n| (n.op, n.bytes)).collect()
    }

    pub fn recorded_bytes(&self) -> usize {
        self.nodes.borrow().iter().map(|n| n.bytes).sum()
    }

    /// For each node, the node indices of its tape-resident inputs.
    pub fn parent_indices(&self) -> Vec<Vec<usize>> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| {
                n.inputs
                    .iter()
                    .filter_map(|t| t.node().filter(|r| self.owns(r)).map(|r| r.index))
                    .collect()
            })
            .collect()
    }

    /// Whether an op on these inputs would be recorded.
    pub fn tracks(&self, inputs: &[&Tensor<T>]) -> bool {
        self.is_recording() && inputs.iter().any(|t| t.requires_grad())
    }

    fn owns(&self, r: &NodeRef) -> bool {
        r.tape == self.id && r.generation == self.generation.get()
    }

    /// Wrap an op's forward result, appending a node when tracking.
    pub fn record(
        &self,
        op: &'static str,
        inputs: &[&Tensor<T>],
        data: Vec<T>,
        shape: Vec<usize>,
        backward: impl Backward<T> + 'static,
    ) -> Tensor<T> {
        if !self.tracks(inputs) {
            return Tensor::plain(data, shape);
        }
        let bytes = bytes_of::<T>(data.len()) + backward.saved_bytes();
        self.meter.alloc(bytes);
        let mut nodes = self.nodes.borrow_mut();
        let node = NodeRef {
            tape: self.id,
            generation: self.generation.get(),
            index: nodes.len(),
        };
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
            bytes,
        });
        Tensor::from_node(data, shape, node)
    }

    /// Drop all nodes. Tensors recorded earlier are no longer on this tape.
    pub fn clear(&self) {
        let mut nodes = self.nodes.borrow_mut();
        for n in nodes.drain(..) {
            self.meter.free(n.bytes);
        }
        self.generation.set(self.generation.get() + 1);
    }

    /// Propagate `seed` (dL/d`root`) back through the tape, adding into the
    /// gradient of every reachable trainable leaf.
    pub fn backward(&self, root: &Tensor<T>, seed: &Tensor<T>) -> Result<()> {
        if seed.shape() != root.shape() {
            return Err(Error::shape("backward", seed.shape(), root.shape()));
        }
        let Some(rref) = root.node() else {
            if root.requires_grad() {
                self.accumulate_leaf(root, seed.to_vec());
                return Ok(());
            }
            return Err(Error::Backward("root does not require grad".into()));
        };
        if !self.owns(&rref) {
            return Err(Error::Backward("root is not on this tape".into()));
        }

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(rref.index + 1, || None);
        self.meter.alloc(bytes_of::<T>(seed.numel()));
        self.meter.grad_alloc();
        grads[rref.index] = Some(seed.to_vec());

        for i in (0..=rref.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let input_grads = node.backward.backward(&g, &node.inputs);
            self.meter.free(bytes_of::<T>(g.len()));
            drop(g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, pg) in node.inputs.iter().zip(input_grads) {
                let Some(pg) = pg else { continue };
                if !input.requires_grad() {
                    continue;
                }
                match input.node() {
                    Some(r) if self.owns(&r) => match grads[r.index].as_mut() {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                        None => {
                            self.meter.alloc(bytes_of::<T>(pg.len()));
                            self.meter.grad_alloc();
                            grads[r.index] = Some(pg);
                        }
                    },
                    Some(_) => {}
                    None => self.accumulate_leaf(input, pg),
                }
            }
        }
        Ok(())
    }

    fn accumulate_leaf(&self, leaf: &Tensor<T>, delta: Vec<T>) {
        if leaf.accumulate_grad(delta) {
            self.meter.grad_alloc();
        }
    }
}

impl<T: Element> Drop for Tape<T> {
    fn drop(&mut self) {
        self.clear();
    }
}
