//! Reverse-mode differentiation over an explicitly recorded graph.
//!
//! Every op appends a node holding its output value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in reverse, applying the
//! vector-Jacobian products from [`crate::tensor::vjp`]. Only first-order
//! gradients are supported.
//!
//! A tape is single-threaded state owned by one evaluation; build one per
//! image when running in parallel.

use crate::error::{Error, Result};
use crate::tensor::{ops, vjp, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<F: Element> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F: Element> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    /// `None` when the node does not influence the output or does not
    /// require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros of `shape` for nodes the
    /// output does not depend on.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<F> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "variable {} is not on this tape",
                var.0
            )));
        }
        Ok(())
    }

    /// Records a leaf that gradients flow to.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf treated as a constant; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::elementwise_mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let v = ops::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        self.check(x)?;
        let v = ops::scale(self.value(x), s);
        Ok(self.push(v, Op::Scale(x, s), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = ops::relu(self.value(x));
        Ok(self.push(v, Op::Relu(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = ops::gelu(self.value(x));
        Ok(self.push(v, Op::Gelu(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = ops::softmax_lastaxis(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let v = ops::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = ops::reshape(self.value(x), shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = ops::permute(self.value(x), axes)?;
        Ok(self.push(v, Op::Permute(x, axes.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&values, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let v = ops::slice(self.value(x), axis, start, end)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    /// Back-propagates `seed` (shaped like `output`) through the tape.
    pub fn backward(&self, output: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        self.check(output)?;
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::shape("backward", seed.shape(), out_shape));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed);
        }
        for id in (0..=output.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let contributions = self.node_vjp(&node.op, &node.value, &upstream)?;
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[var.0], g)?;
            }
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn node_vjp(
        &self,
        op: &Op<F>,
        out: &Tensor<F>,
        up: &Tensor<F>,
    ) -> Result<Vec<(Var, Tensor<F>)>> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.value(v);
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut g = Vec::with_capacity(2);
                if wants(*a) {
                    g.push((*a, vjp::vjp_matmul_lhs(val(*a), val(*b), up)?));
                }
                if wants(*b) {
                    g.push((*b, vjp::vjp_matmul_rhs(val(*a), val(*b), up)?));
                }
                g
            }
            Op::Add(a, b) => {
                let (ga, gb) = vjp::vjp_add(val(*a), val(*b), up)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ga, gb) = vjp::vjp_elementwise_mul(val(*a), val(*b), up)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias(x, b) => {
                let (gx, gb) = vjp::vjp_add_bias(val(*x), val(*b), up)?;
                vec![(*x, gx), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, vjp::vjp_scale(*s, up))],
            Op::Relu(x) => vec![(*x, vjp::vjp_relu(val(*x), up)?)],
            Op::Gelu(x) => vec![(*x, vjp::vjp_gelu(val(*x), up)?)],
            Op::Softmax(x) => vec![(*x, vjp::vjp_softmax(out, up)?)],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (gx, gg, gb) = vjp::vjp_layernorm(val(*x), val(*gamma), *eps, up)?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Reshape(x) => vec![(*x, vjp::vjp_reshape(val(*x).shape(), up)?)],
            Op::Permute(x, axes) => vec![(*x, vjp::vjp_permute(axes, up)?)],
            Op::Concat(parts, axis) => {
                let shapes: Vec<Vec<usize>> =
                    parts.iter().map(|&p| val(p).shape().to_vec()).collect();
                parts
                    .iter()
                    .copied()
                    .zip(vjp::vjp_concat(&shapes, *axis, up)?)
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                vec![(*x, vjp::vjp_slice(val(*x).shape(), *axis, *start, up)?)]
            }
        })
    }
}

fn accumulate<F: Element>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => ops::add(&prev, &g)?,
    });
    Ok(())
}
