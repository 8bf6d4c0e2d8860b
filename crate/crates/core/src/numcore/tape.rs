//! Reverse-mode differentiation over a linear record of primitive calls.
//!
//! Nodes are appended in evaluation order, so the record is topologically
//! sorted by construction and the backward sweep is a single reverse pass.

use std::collections::BTreeMap;

use super::tensor::{Primitive, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor across tape lifetimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Unary(Primitive, Var),
    Binary(Primitive, Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients(BTreeMap<ParamId, Tensor>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.0.iter()
    }

    /// Global L2 norm over all gradients.
    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Gradients in parameter-id order, zero-filled for parameters the loss did not reach.
    pub fn ordered(&self, shapes: &[&[usize]]) -> Vec<Tensor> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                self.0
                    .get(&ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(s))
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = super::tensor::forward_primitive(op, &values)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let rec = match *inputs {
            [a] => Op::Unary(op, a),
            [a, b] => Op::Binary(op, a, b),
            _ => unreachable!("arity checked by forward_primitive"),
        };
        Ok(self.push(out, rec, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
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

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::PairwiseSqdist, &[a, b])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let mut nodes = self.nodes;
        if nodes.is_empty() {
            return Ok(Gradients::default());
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !nodes[idx].needs_grad {
                continue;
            }
            match nodes[idx].op {
                Op::Leaf => {}
                Op::Param(id) => accumulate_param(&mut out, id, g),
                Op::Unary(op, a) => {
                    let ga = unary_grad(op, &nodes[a.0].value, &nodes[idx].value, &g)?;
                    if nodes[a.0].needs_grad {
                        accumulate(&mut grads, a, ga);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (ga, gb) = binary_grad(op, &nodes[a.0].value, &nodes[b.0].value, &g)?;
                    if nodes[a.0].needs_grad {
                        accumulate(&mut grads, a, ga);
                    }
                    if nodes[b.0].needs_grad {
                        accumulate(&mut grads, b, gb);
                    }
                }
            }
            // values are no longer needed once every consumer has been visited
            if !matches!(nodes[idx].op, Op::Param(_)) {
                nodes[idx].value = Tensor::zeros(&[0]);
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_param(out: &mut Gradients, id: ParamId, g: Tensor) {
    match out.0.get_mut(&id) {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        None => {
            out.0.insert(id, g);
        }
    }
}

fn unary_grad(op: Primitive, x: &Tensor, y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let data: Vec<f64> = match op {
        Primitive::Relu => x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
            .collect(),
        // d sqrt(s) = 1/(2 sqrt s); at s = 0 the subgradient 0 is used.
        Primitive::Sqrt => y
            .data()
            .iter()
            .zip(g.data())
            .map(|(&yv, &gv)| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 })
            .collect(),
        Primitive::Scale(c) => g.data().iter().map(|gv| gv * c).collect(),
        Primitive::SoftmaxRows => {
            let c = y.cols().max(1);
            let mut out = vec![0.0; y.len()];
            for ((o, yr), gr) in out
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.data().chunks(c))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                    *ov = yv * (gv - dot);
                }
            }
            out
        }
        Primitive::Log => x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&xv, &gv)| gv / xv)
            .collect(),
        Primitive::Sum => {
            let gv = g.item()?;
            vec![gv; x.len()]
        }
        Primitive::Mean => {
            let gv = g.item()? / x.len() as f64;
            vec![gv; x.len()]
        }
        other => {
            return Err(Error::Contract(format!("{other:?} is not unary")));
        }
    };
    Tensor::new(shape, data)
}

fn binary_grad(op: Primitive, a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    match op {
        Primitive::MatMul => {
            let ga = g.matmul(&b.transpose()?)?;
            let gb = a.transpose()?.matmul(g)?;
            Ok((ga, gb))
        }
        Primitive::Add => {
            let ga = g.clone();
            let gb = if a.shape() == b.shape() {
                g.clone()
            } else {
                // broadcast row: sum over rows
                let c = g.cols();
                let mut acc = vec![0.0; c];
                for row in g.row_iter() {
                    for (s, v) in acc.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                Tensor::new(b.shape().to_vec(), acc)?
            };
            Ok((ga, gb))
        }
        Primitive::Sub => Ok((g.clone(), g.scale(-1.0))),
        Primitive::Mul => Ok((g.mul(b)?, g.mul(a)?)),
        Primitive::PairwiseSqdist => {
            let (n, d) = (a.rows(), a.cols());
            let m = b.rows();
            let mut ga = vec![0.0; n * d];
            let mut gb = vec![0.0; m * d];
            for i in 0..n {
                let ar = a.row(i);
                for j in 0..m {
                    let w = 2.0 * g.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let br = b.row(j);
                    for k in 0..d {
                        let diff = w * (ar[k] - br[k]);
                        ga[i * d + k] += diff;
                        gb[j * d + k] -= diff;
                    }
                }
            }
            Ok((
                Tensor::new(a.shape().to_vec(), ga)?,
                Tensor::new(b.shape().to_vec(), gb)?,
            ))
        }
        other => Err(Error::Contract(format!("{other:?} is not binary"))),
    }
}
