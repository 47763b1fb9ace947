use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of one recorded op.
pub(crate) trait Backward<S: Float> {
    /// Propagates `grad` (gradient w.r.t. this op's output `out`) to parents.
    fn backward(&self, out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>);
}

enum NodeKind<S: Float> {
    Leaf,
    Param(ParamId),
    Op(Box<dyn Backward<S>>),
}

struct Node<S: Float> {
    value: Tensor<S>,
    requires_grad: bool,
    kind: NodeKind<S>,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<S: Float> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Float> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Float> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_node(value, false, NodeKind::Leaf)
    }

    /// Input that receives a gradient on [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.push_node(value, true, NodeKind::Leaf)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same
    /// handle, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_node(p.value.clone(), p.trainable, NodeKind::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element; convenient for scalar losses.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor<S>, requires_grad: bool, kind: NodeKind<S>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            kind,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op output. Gradient tracking is on iff any parent tracks.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<S>,
        parents: &[Var],
        op: impl Backward<S> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        if requires_grad {
            self.push_node(value, true, NodeKind::Op(Box::new(op)))
        } else {
            self.push_node(value, false, NodeKind::Leaf)
        }
    }

    /// Differentiates the scalar `loss` w.r.t. every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        self.backward_with_seed(loss, vec![S::one()])
    }

    /// Backward pass from an arbitrary output with the given upstream gradient.
    pub fn backward_with_seed(&self, output: Var, seed: Vec<S>) -> Result<Gradients<S>> {
        if seed.len() != self.nodes[output.0].value.numel() {
            return Err(TensorError::InvalidArgument(
                "backward seed does not match output size".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let NodeKind::Op(op) = &node.kind else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            op.backward(&node.value, &g, &mut sink);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// `(param, grad)` pairs for every parameter that received a gradient.
    pub(crate) fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients<S>,
    ) -> impl Iterator<Item = (ParamId, &'a [S])> + 'a {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(move |(i, n)| match n.kind {
                NodeKind::Param(id) => grads.grads[i].as_deref().map(|g| (id, g)),
                _ => None,
            })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Float> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Write access to parent gradients during a backward step.
pub(crate) struct GradSink<'a, S: Float> {
    nodes: &'a [Node<S>],
    grads: &'a mut [Option<Vec<S>>],
}

impl<'a, S: Float> GradSink<'a, S> {
    pub fn value(&self, v: Var) -> &'a Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `f` on the (zero-initialised on first use) gradient buffer of `v`,
    /// skipping nodes that do not track gradients.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        f(buf);
    }

    pub fn add(&mut self, v: Var, delta: &[S]) {
        self.with(v, |g| {
            for (a, &b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        });
    }
}
