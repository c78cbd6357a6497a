//! Reverse-mode differentiation over an append-only graph.
//!
//! Nodes are stored in an arena; a [`Var`] is an index into it. Parents always
//! precede children, so a reverse index sweep is a valid topological order.
//! Forward values are computed eagerly when a node is inserted (via the
//! kernels), and [`Graph::backward`] only reads them, so a graph can be
//! evaluated and differentiated repeatedly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::kernels as k;
use crate::numeric::optim::ParamSet;
use crate::numeric::scalar::Scalar;
use crate::numeric::tensor::Tensor;

/// Handle to a graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf { name: Option<String> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    AddBias { x: Var, bias: Var },
    MeanAxis1(Var),
    LayerNormCols { x: Var, gamma: Var, beta: Var, eps: T },
    L2NormalizeVec(Var),
    L2NormalizeCols(Var),
    VecMat { v: Var, m: Var },
    Dot(Var, Var),
    SumAll(Var),
    MaxAll { x: Var, winner: usize },
    Reshape(Var),
    Stack { parts: Vec<Var> },
    InfoNce { s: Var, tau: T },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only reverse-mode graph.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("var {} not in this graph", v.0)));
        }
        Ok(())
    }

    /// Named leaf; the name keys its gradient in [`Graph::named_gradients`].
    pub fn leaf(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.push(
            value,
            Op::Leaf {
                name: Some(name.to_string()),
            },
        )
    }

    /// Anonymous leaf; receives no named gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { name: None })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.nodes[v.0].value.item()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check(a)?;
        let v = k::scale(&self.nodes[a.0].value, c)?;
        Ok(self.push(v, Op::Scale(a, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = k::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let v = k::add_bias(&self.nodes[x.0].value, &self.nodes[bias.0].value)?;
        Ok(self.push(v, Op::AddBias { x, bias }))
    }

    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = k::mean_axis1(&self.nodes[x.0].value)?;
        Ok(self.push(v, Op::MeanAxis1(x)))
    }

    pub fn layernorm_cols(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let v = k::layernorm_cols(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        )?;
        Ok(self.push(v, Op::LayerNormCols { x, gamma, beta, eps }))
    }

    pub fn l2_normalize_vec(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = k::l2_normalize_vec(&self.nodes[x.0].value)?;
        Ok(self.push(v, Op::L2NormalizeVec(x)))
    }

    pub fn l2_normalize_cols(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = k::l2_normalize_cols(&self.nodes[x.0].value)?;
        Ok(self.push(v, Op::L2NormalizeCols(x)))
    }

    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        self.check(v)?;
        self.check(m)?;
        let val = k::vecmat(&self.nodes[v.0].value, &self.nodes[m.0].value)?;
        Ok(self.push(val, Op::VecMat { v, m }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = k::dot(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(Tensor::scalar(v)?, Op::Dot(a, b)))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = k::sum_all(&self.nodes[x.0].value);
        Ok(self.push(Tensor::scalar(v)?, Op::SumAll(x)))
    }

    /// Maximum entry; the winner (smallest row-major flat index among ties)
    /// is fixed at insertion and receives the whole subgradient.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (v, winner) = k::max_all(&self.nodes[x.0].value)?;
        Ok(self.push(Tensor::scalar(v)?, Op::MaxAll { x, winner }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let v = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Stacks `rows*cols` scalar nodes into a `[rows, cols]` matrix.
    pub fn stack_matrix(&mut self, parts: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if parts.len() != rows * cols {
            return Err(Error::shape(format!(
                "stack: {} parts into {rows}x{cols}",
                parts.len()
            )));
        }
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            self.check(*p)?;
            data.push(self.nodes[p.0].value.item()?);
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(v, Op::Stack { parts: parts.to_vec() }))
    }

    /// Symmetric InfoNCE loss node over a square score matrix.
    pub fn infonce(&mut self, s: Var, tau: T) -> Result<Var> {
        self.check(s)?;
        let v = k::infonce(&self.nodes[s.0].value, tau)?;
        Ok(self.push(Tensor::scalar(v)?, Op::InfoNce { s, tau }))
    }

    fn parents(&self, id: usize) -> Vec<usize> {
        match &self.nodes[id].op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Dot(a, b) => {
                vec![a.0, b.0]
            }
            Op::Scale(a, _)
            | Op::MeanAxis1(a)
            | Op::L2NormalizeVec(a)
            | Op::L2NormalizeCols(a)
            | Op::SumAll(a)
            | Op::Reshape(a) => vec![a.0],
            Op::AddBias { x, bias } => vec![x.0, bias.0],
            Op::LayerNormCols { x, gamma, beta, .. } => vec![x.0, gamma.0, beta.0],
            Op::VecMat { v, m } => vec![v.0, m.0],
            Op::MaxAll { x, .. } => vec![x.0],
            Op::Stack { parts } => parts.iter().map(|p| p.0).collect(),
            Op::InfoNce { s, .. } => vec![s.0],
        }
    }

    /// Gradients of a scalar root with respect to every node, `None` for
    /// nodes the root does not depend on. The graph itself is untouched and
    /// stays usable.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Tensor<T>>>> {
        self.check(root)?;
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(id) = stack.pop() {
            if reachable[id] {
                continue;
            }
            reachable[id] = true;
            for p in self.parents(id) {
                if p >= id {
                    return Err(Error::invalid("graph cycle detected"));
                }
                stack.push(p);
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(
            self.nodes[root.0].value.shape().to_vec(),
            T::one(),
        )?);

        for id in (0..=root.0).rev() {
            if !reachable[id] {
                continue;
            }
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            let val = |v: &Var| &self.nodes[v.0].value;
            match &self.nodes[id].op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a.0, g.clone())?;
                    self.accumulate(&mut grads, b.0, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a.0, g.clone())?;
                    let neg = g.map(|v| -v)?;
                    self.accumulate(&mut grads, b.0, neg)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(val(b), |x, y| x * y)?;
                    let db = g.zip_map(val(a), |x, y| x * y)?;
                    self.accumulate(&mut grads, a.0, da)?;
                    self.accumulate(&mut grads, b.0, db)?;
                }
                Op::Scale(a, c) => {
                    let da = k::scale(&g, *c)?;
                    self.accumulate(&mut grads, a.0, da)?;
                }
                Op::MatMul(a, b) => {
                    let (da, db) = k::matmul_vjp(&g, val(a), val(b))?;
                    self.accumulate(&mut grads, a.0, da)?;
                    self.accumulate(&mut grads, b.0, db)?;
                }
                Op::AddBias { x, bias } => {
                    let db = k::add_bias_vjp_bias(&g)?;
                    self.accumulate(&mut grads, x.0, g)?;
                    self.accumulate(&mut grads, bias.0, db)?;
                }
                Op::MeanAxis1(a) => {
                    let cols = val(a).shape()[1];
                    let da = k::mean_axis1_vjp(&g, cols)?;
                    self.accumulate(&mut grads, a.0, da)?;
                }
                Op::LayerNormCols { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) = k::layernorm_cols_vjp(&g, val(x), val(gamma), *eps)?;
                    self.accumulate(&mut grads, x.0, dx)?;
                    self.accumulate(&mut grads, gamma.0, dgamma)?;
                    self.accumulate(&mut grads, beta.0, dbeta)?;
                }
                Op::L2NormalizeVec(a) => {
                    let da = k::l2_normalize_vec_vjp(&g, val(a))?;
                    self.accumulate(&mut grads, a.0, da)?;
                }
                Op::L2NormalizeCols(a) => {
                    let da = k::l2_normalize_cols_vjp(&g, val(a))?;
                    self.accumulate(&mut grads, a.0, da)?;
                }
                Op::VecMat { v, m } => {
                    let (dv, dm) = k::vecmat_vjp(&g, val(v), val(m))?;
                    self.accumulate(&mut grads, v.0, dv)?;
                    self.accumulate(&mut grads, m.0, dm)?;
                }
                Op::Dot(a, b) => {
                    let gv = g.item()?;
                    let da = val(b).map(|v| v * gv)?;
                    let db = val(a).map(|v| v * gv)?;
                    self.accumulate(&mut grads, a.0, da)?;
                    self.accumulate(&mut grads, b.0, db)?;
                }
                Op::SumAll(a) => {
                    let gv = g.item()?;
                    let da = Tensor::full(val(a).shape().to_vec(), gv)?;
                    self.accumulate(&mut grads, a.0, da)?;
                }
                Op::MaxAll { x, winner } => {
                    let gv = g.item()?;
                    let mut da = Tensor::zeros(val(x).shape().to_vec());
                    da.data_mut()[*winner] = gv;
                    self.accumulate(&mut grads, x.0, da)?;
                }
                Op::Reshape(a) => {
                    let da = g.reshaped(val(a).shape().to_vec())?;
                    self.accumulate(&mut grads, a.0, da)?;
                }
                Op::Stack { parts } => {
                    for (idx, p) in parts.iter().enumerate() {
                        let gv = g.data()[idx];
                        let shape = val(p).shape().to_vec();
                        let da = Tensor::full(shape, gv)?;
                        self.accumulate(&mut grads, p.0, da)?;
                    }
                }
                Op::InfoNce { s, tau } => {
                    let gv = g.item()?;
                    let ds = k::scale(&k::infonce_grad(val(s), *tau)?, gv)?;
                    self.accumulate(&mut grads, s.0, ds)?;
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        id: usize,
        delta: Tensor<T>,
    ) -> Result<()> {
        grads[id] = Some(match grads[id].take() {
            Some(g) => g.zip_map(&delta, |a, b| a + b)?,
            None => delta,
        });
        Ok(())
    }

    /// Gradients of a scalar root keyed by leaf name.
    pub fn named_gradients(&self, root: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let grads = self.backward(root)?;
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let g = match &grads[id] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(node.value.shape().to_vec()),
                };
                if out.insert(name.clone(), g).is_some() {
                    return Err(Error::invalid(format!("duplicate leaf name '{name}'")));
                }
            }
        }
        Ok(out)
    }
}

/// Gradients of `root` for exactly the trainable parameters of `params`.
///
/// Every trainable parameter must appear as a named leaf the root depends on
/// (a frozen parameter belongs in the graph as a constant, so it receives no
/// gradient).
pub fn reverse_mode_gradients<T: Scalar>(
    graph: &Graph<T>,
    root: Var,
    params: &ParamSet<T>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let named = graph.named_gradients(root)?;
    let mut out = BTreeMap::new();
    for name in params.trainable_names() {
        match named.get(&name) {
            Some(g) => {
                out.insert(name, g.clone());
            }
            None => {
                return Err(Error::invalid(format!(
                    "trainable parameter '{name}' is not reachable in the graph"
                )))
            }
        }
    }
    Ok(out)
}
