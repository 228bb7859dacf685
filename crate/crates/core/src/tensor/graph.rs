use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one op.
///
/// Called with the input values, the op's output value, the upstream gradient
/// and a per-input flag telling which input gradients are wanted. Returns one
/// entry per input; `None` means no contribution.
pub type Backward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    param: Option<ParamId>,
    backward: Option<Backward<T>>,
}

/// Recording tape. One graph per forward pass; values are kept for backward.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    non_finite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, op: &'static str, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.note_finite(op, &value);
        self.nodes.push(Node { op, value, inputs: Vec::new(), requires_grad, param, backward: None });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf("constant", value, false, None)
    }

    /// A leaf that receives gradients but is not backed by a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf("variable", value, true, None)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.leaf("param", store.value(id).clone(), true, Some(id))
    }

    /// Leaves for every parameter in the store, indexed by `ParamId::index`.
    pub fn params(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn note_finite(&mut self, op: &'static str, value: &Tensor<T>) {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((self.nodes.len(), op));
        }
    }

    /// Records an op. `backward` is dropped when no input needs gradients.
    pub fn push(&mut self, op: &'static str, value: Tensor<T>, inputs: &[Var], backward: Backward<T>) -> Var {
        self.note_finite(op, &value);
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.to_vec(),
            requires_grad,
            param: None,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Fails if any recorded value so far contains NaN or Inf.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            None => Ok(()),
            Some((idx, op)) => Err(Error::Numeric(format!("non-finite value produced by `{op}` (node {idx})"))),
        }
    }

    /// Reverse pass from a scalar output. Gradients are retrievable with
    /// [`Graph::grad`] until the next call.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.check_finite()?;
        let out_value = &self.nodes[output.0].value;
        if out_value.numel() != 1 {
            return Err(Error::dim(format!("backward needs a scalar, got shape {:?}", out_value.shape())));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(Tensor::ones(out_value.shape()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let (Some(backward), true) = (&node.backward, node.requires_grad) else {
                continue;
            };
            let Some(grad_out) = self.grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = backward(&inputs, &node.value, &grad_out, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op `{}`", node.op);
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::dim(format!(
                        "op `{}` produced gradient {:?} for input {:?}",
                        node.op,
                        g.shape(),
                        self.nodes[v.0].value.shape()
                    )));
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            self.grads[idx] = Some(grad_out);
        }

        for (idx, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at node {idx} (`{}`)",
                        self.nodes[idx].op
                    )));
                }
            }
        }
        Ok(())
    }

    /// Values of every recorded node of kind `op`, in recording order.
    pub fn values_of<'a>(&'a self, op: &'a str) -> impl Iterator<Item = &'a Tensor<T>> + 'a {
        self.nodes.iter().filter(move |n| n.op == op).map(|n| &n.value)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (idx, node) in self.nodes.iter().enumerate() {
            let (Some(pid), Some(g)) = (node.param, self.grads.get(idx).and_then(|g| g.as_ref())) else {
                continue;
            };
            store.grad_mut(pid).add_assign(g);
        }
    }
}
