use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the upstream gradient of a node to one gradient per input
/// (`None` when that input receives nothing).
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    tracked: bool,
    backward: Option<BackwardFn>,
}

/// Append-only record of a forward computation. Node ids are assigned in
/// creation order, which is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
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

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A value whose gradient is tracked (a trainable parameter or an input
    /// under a gradient check).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            inputs: vec![],
            tracked: true,
            backward: None,
        });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            inputs: vec![],
            tracked: false,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Registers the result of an operation. The backward rule is kept only
    /// when some input is tracked.
    pub fn record<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
                nodes[v.id].tracked
            })
        };
        let id = self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            tracked,
            backward: tracked.then(|| Box::new(backward) as BackwardFn),
        });
        Var { tape: self, id }
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let input_grads = backward(&upstream);
            grads[id] = Some(upstream);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !nodes[input].tracked {
                    continue;
                }
                debug_assert_eq!(grad.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros if the loss does not depend
    /// on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.grads
            .get(var.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}
