use crate::autodiff::kernels::{self, COSINE_EPS};
use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Primitive operations recordable on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MeanAll,
    MeanRows,
    Abs,
    Log,
    Exp,
    RowSoftmax,
    RowL2Normalize,
    CosineMatrix,
    Tanh,
    Relu,
    ConcatRows,
    Detach,
}

impl Primitive {
    fn arity(self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::CosineMatrix
            | Primitive::ConcatRows => 2,
            _ => 1,
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Option<(Primitive, [usize; 2])>,
    requires_grad: bool,
}

/// Tape of primitive applications. Nodes are appended in evaluation order,
/// so the node vector is already topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<(Primitive, [usize; 2])>, rg: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, None, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Applies `prim` to `inputs` and records the node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != prim.arity() {
            return Err(Error::InvalidArgument(format!(
                "{prim:?} takes {} inputs, got {}",
                prim.arity(),
                inputs.len()
            )));
        }
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|v| &self.nodes[v.0].value);
        let value = match prim {
            Primitive::MatMul => kernels::matmul(a, b.unwrap())?,
            Primitive::Transpose => kernels::transpose(a)?,
            Primitive::Add => kernels::add(a, b.unwrap())?,
            Primitive::Sub => kernels::sub(a, b.unwrap())?,
            Primitive::Mul => kernels::mul(a, b.unwrap())?,
            Primitive::Scale(s) => kernels::scale(a, s),
            Primitive::MeanAll => kernels::mean_all(a),
            Primitive::MeanRows => kernels::mean_rows(a)?,
            Primitive::Abs => kernels::abs(a),
            Primitive::Log => kernels::log(a)?,
            Primitive::Exp => kernels::exp(a),
            Primitive::RowSoftmax => kernels::row_softmax(a)?,
            Primitive::RowL2Normalize => kernels::row_l2_normalize(a)?,
            Primitive::CosineMatrix => kernels::cosine_matrix(a, b.unwrap())?,
            Primitive::Tanh => kernels::tanh(a),
            Primitive::Relu => kernels::relu(a),
            Primitive::ConcatRows => kernels::concat_rows(a, b.unwrap())?,
            Primitive::Detach => return Ok(self.constant(a.clone())),
        };
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = [inputs[0].0, inputs.get(1).map_or(usize::MAX, |v| v.0)];
        Ok(self.push(value, Some((prim, ids)), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[a])
    }
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::MeanAll, &[a])
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::MeanRows, &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::RowSoftmax, &[a])
    }
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::RowL2Normalize, &[a])
    }
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::CosineMatrix, &[a, b])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::ConcatRows, &[a, b])
    }
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Detach, &[a])
    }

    /// Reverse pass from a scalar root. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some((prim, ids)) = node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = self.vjp(prim, ids, &node.value, &g)?;
            grads[id] = Some(g);
            for (input, contrib) in ids.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[*input].requires_grad {
                    continue;
                }
                match &mut grads[*input] {
                    Some(acc) => {
                        for (a, c) in acc.values_mut().iter_mut().zip(contrib.values()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Vector-Jacobian products of one node with respect to each of its inputs.
    fn vjp(
        &self,
        prim: Primitive,
        ids: [usize; 2],
        out: &Tensor,
        g: &Tensor,
    ) -> Result<[Option<Tensor>; 2]> {
        let a = &self.nodes[ids[0]].value;
        let b = (ids[1] != usize::MAX).then(|| &self.nodes[ids[1]].value);
        let unary = |t: Tensor| Ok([Some(t), None]);
        let elementwise = |f: &dyn Fn(usize) -> f64| {
            let values = (0..g.len()).map(f).collect();
            Tensor::new(g.shape().to_vec(), values)
        };
        let gv = g.values();
        match prim {
            Primitive::MatMul => {
                let b = b.unwrap();
                let da = kernels::matmul(g, &kernels::transpose(b)?)?;
                let db = kernels::matmul(&kernels::transpose(a)?, g)?;
                Ok([Some(da), Some(db)])
            }
            Primitive::Transpose => unary(kernels::transpose(g)?),
            Primitive::Add => Ok([Some(g.clone()), Some(g.clone())]),
            Primitive::Sub => Ok([Some(g.clone()), Some(kernels::scale(g, -1.0))]),
            Primitive::Mul => {
                let b = b.unwrap();
                Ok([Some(kernels::mul(g, b)?), Some(kernels::mul(g, a)?)])
            }
            Primitive::Scale(s) => unary(kernels::scale(g, s)),
            Primitive::MeanAll => {
                let v = gv[0] / a.len() as f64;
                unary(Tensor::filled(a.shape(), v))
            }
            Primitive::MeanRows => {
                let (r, c) = a.dims2()?;
                let mut values = Vec::with_capacity(r * c);
                for &gi in gv.iter().take(r) {
                    values.extend(std::iter::repeat_n(gi / c as f64, c));
                }
                unary(Tensor::matrix(r, c, values)?)
            }
            Primitive::Abs => {
                let av = a.values();
                unary(elementwise(&|i| {
                    let s = if av[i] > 0.0 {
                        1.0
                    } else if av[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gv[i] * s
                })?)
            }
            Primitive::Log => {
                let av = a.values();
                unary(elementwise(&|i| gv[i] / av[i])?)
            }
            Primitive::Exp => {
                let ov = out.values();
                unary(elementwise(&|i| gv[i] * ov[i])?)
            }
            Primitive::Tanh => {
                let ov = out.values();
                unary(elementwise(&|i| gv[i] * (1.0 - ov[i] * ov[i]))?)
            }
            Primitive::Relu => {
                let av = a.values();
                unary(elementwise(&|i| if av[i] > 0.0 { gv[i] } else { 0.0 })?)
            }
            Primitive::RowSoftmax => {
                let (r, c) = out.dims2()?;
                let mut values = Vec::with_capacity(r * c);
                for i in 0..r {
                    let y = out.row(i);
                    let gr = &gv[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    values.extend(y.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                unary(Tensor::matrix(r, c, values)?)
            }
            Primitive::RowL2Normalize => {
                let (r, c) = a.dims2()?;
                let norms = kernels::row_norms(a, "row-l2-normalize")?;
                let mut values = Vec::with_capacity(r * c);
                for (i, n) in norms.iter().enumerate() {
                    let y = out.row(i);
                    let gr = &gv[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    values.extend(y.iter().zip(gr).map(|(y, g)| (g - y * dot) / n));
                }
                unary(Tensor::matrix(r, c, values)?)
            }
            Primitive::CosineMatrix => {
                let b = b.unwrap();
                let (r, d) = a.dims2()?;
                let (m, _) = b.dims2()?;
                let na = kernels::row_norms(a, "cosine")?;
                let nb = kernels::row_norms(b, "cosine")?;
                let mut da = vec![0.0; r * d];
                let mut db = vec![0.0; m * d];
                for i in 0..r {
                    let ai = a.row(i);
                    for j in 0..m {
                        let gij = gv[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = b.row(j);
                        let den = na[i] * nb[j] + COSINE_EPS;
                        let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                        let k = dot / (den * den);
                        let ca = k * nb[j] / na[i];
                        let cb = k * na[i] / nb[j];
                        for t in 0..d {
                            da[i * d + t] += gij * (bj[t] / den - ca * ai[t]);
                            db[j * d + t] += gij * (ai[t] / den - cb * bj[t]);
                        }
                    }
                }
                Ok([
                    Some(Tensor::matrix(r, d, da)?),
                    Some(Tensor::matrix(m, d, db)?),
                ])
            }
            Primitive::ConcatRows => {
                let b = b.unwrap();
                let split = a.len();
                let ga = Tensor::new(a.shape().to_vec(), gv[..split].to_vec())?;
                let gb = Tensor::new(b.shape().to_vec(), gv[split..].to_vec())?;
                Ok([Some(ga), Some(gb)])
            }
            Primitive::Detach => shape_err("detach nodes are leaves"),
        }
    }
}
