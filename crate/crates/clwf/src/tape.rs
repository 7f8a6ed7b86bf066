//! Reverse-mode automatic differentiation on a linear tape.
//!
//! The op vocabulary is static: every differentiable computation in this
//! crate is spelled out of the kinds below, which keeps the gradient pass
//! auditable op-by-op. Nodes are appended in evaluation order, so inputs
//! always precede outputs and the backward pass is a single reverse sweep
//! visiting each node exactly once.

use crate::tensor::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

/// Operation kinds recordable on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Leaf value (constant input or trainable parameter).
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    /// x·W + b with row-wise bias.
    Affine,
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    /// Mean over all entries, producing a scalar.
    Mean,
    /// Sum over all entries, producing a scalar.
    Sum,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Constant scalar multiple.
    Scale { factor: f64 },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert tape: append-only record of operations in forward order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one gradient slot per tape node.
///
/// Gradients are retained for leaves that require grad; interior nodes are
/// consumed during the sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf that does not need a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn input_tensors(&self, inputs: &[NodeId]) -> Vec<&Tensor> {
        inputs.iter().map(|id| &self.nodes[*id].value).collect()
    }

    /// Evaluate `op` on `inputs` and record the result.
    ///
    /// The value equals the corresponding [`Tensor`] operation exactly; shape
    /// mismatches surface as errors naming the operation and shapes.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let arity_err = |want: usize| {
            Err(Error::Shape(format!(
                "{op:?}: expected {want} inputs, got {}",
                inputs.len()
            )))
        };
        let vals = self.input_tensors(inputs);
        let value = match (&op, vals.as_slice()) {
            (Op::Leaf, _) => {
                return Err(Error::Domain(
                    "leaf nodes are created via constant()/param()".to_string(),
                ))
            }
            (Op::Add, [a, b]) => a.add(b)?,
            (Op::Sub, [a, b]) => a.sub(b)?,
            (Op::Mul, [a, b]) => a.mul(b)?,
            (Op::MatMul, [a, b]) => a.matmul(b)?,
            (Op::Affine, [x, w, b]) => x.affine(w, b)?,
            (Op::Tanh, [x]) => x.tanh()?,
            (Op::Relu, [x]) => x.relu()?,
            (Op::Exp, [x]) => x.exp()?,
            (Op::Log, [x]) => x.log()?,
            (Op::Square, [x]) => x.square()?,
            (Op::Mean, [x]) => x.mean()?,
            (Op::Sum, [x]) => x.sum()?,
            (Op::Concat { axis }, parts) if !parts.is_empty() => Tensor::concat(*axis, parts)?,
            (Op::Slice { axis, start, len }, [x]) => x.slice(*axis, *start, *len)?,
            (Op::Scale { factor }, [x]) => x.scale(*factor)?,
            (Op::Add | Op::Sub | Op::Mul | Op::MatMul, _) => return arity_err(2),
            (Op::Affine, _) => return arity_err(3),
            _ => return arity_err(1),
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[*id].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Affine, &[x, w, b])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale { factor }, &[x])
    }

    /// Reverse sweep from a scalar loss node. Gradients follow the analytic
    /// chain rule; constants (requires_grad = false) are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss)
            .ok_or_else(|| Error::Domain(format!("backward: node {loss} not on tape")))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if node.op == Op::Leaf || !node.requires_grad {
                continue;
            }
            // Consumers of `id` all have larger ids, so its gradient is final
            // here and can be consumed for the inputs' contributions.
            let d_out = match grads[id].take() {
                Some(g) => g,
                None => continue, // not on a path to the loss
            };
            self.backward_op(id, &d_out, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, id: NodeId, d_out: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i]].value;
        let needs = |i: usize| self.nodes[ins[i]].requires_grad;
        let mut acc = |slot: NodeId, delta: Tensor| {
            match &mut grads[slot] {
                Some(g) => g.add_assign(&delta),
                None => grads[slot] = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if needs(0) {
                    acc(ins[0], d_out.clone());
                }
                if needs(1) {
                    acc(ins[1], d_out.clone());
                }
            }
            Op::Sub => {
                if needs(0) {
                    acc(ins[0], d_out.clone());
                }
                if needs(1) {
                    acc(ins[1], d_out.scale(-1.0)?);
                }
            }
            Op::Mul => {
                if needs(0) {
                    acc(ins[0], d_out.mul(val(1))?);
                }
                if needs(1) {
                    acc(ins[1], d_out.mul(val(0))?);
                }
            }
            Op::MatMul => {
                if needs(0) {
                    acc(ins[0], d_out.matmul(&val(1).transpose()?)?);
                }
                if needs(1) {
                    acc(ins[1], val(0).transpose()?.matmul(d_out)?);
                }
            }
            Op::Affine => {
                // out = x·W + b
                if needs(0) {
                    acc(ins[0], d_out.matmul(&val(1).transpose()?)?);
                }
                if needs(1) {
                    acc(ins[1], val(0).transpose()?.matmul(d_out)?);
                }
                if needs(2) {
                    let n = d_out.cols()?;
                    let mut db = Tensor::zeros(&[n]);
                    for row in d_out.data().chunks(n) {
                        for (acc_v, v) in db.data_mut().iter_mut().zip(row) {
                            *acc_v += v;
                        }
                    }
                    acc(ins[2], db);
                }
            }
            Op::Tanh => {
                if needs(0) {
                    let one_minus_sq = node.value.square()?.scale(-1.0)?;
                    let ones = Tensor::full(node.value.shape(), 1.0);
                    acc(ins[0], d_out.mul(&ones.add(&one_minus_sq)?)?);
                }
            }
            Op::Relu => {
                if needs(0) {
                    let gate: Vec<f64> = val(0)
                        .data()
                        .iter()
                        .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    let gate = Tensor::new(val(0).shape().to_vec(), gate)?;
                    acc(ins[0], d_out.mul(&gate)?);
                }
            }
            Op::Exp => {
                if needs(0) {
                    acc(ins[0], d_out.mul(&node.value)?);
                }
            }
            Op::Log => {
                if needs(0) {
                    acc(ins[0], d_out.div(val(0))?);
                }
            }
            Op::Square => {
                if needs(0) {
                    acc(ins[0], d_out.mul(val(0))?.scale(2.0)?);
                }
            }
            Op::Mean => {
                if needs(0) {
                    let x = val(0);
                    let g = d_out.item()? / x.len() as f64;
                    acc(ins[0], Tensor::full(x.shape(), g));
                }
            }
            Op::Sum => {
                if needs(0) {
                    acc(ins[0], Tensor::full(val(0).shape(), d_out.item()?));
                }
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                for input in ins {
                    let w = self.nodes[*input].value.shape()[*axis];
                    if self.nodes[*input].requires_grad {
                        acc(*input, d_out.slice(*axis, offset, w)?);
                    }
                    offset += w;
                }
            }
            Op::Slice { axis, start, len } => {
                if needs(0) {
                    let x = val(0);
                    let mut dx = Tensor::zeros(x.shape());
                    scatter_slice(&mut dx, d_out, *axis, *start, *len);
                    acc(ins[0], dx);
                }
            }
            Op::Scale { factor } => {
                if needs(0) {
                    acc(ins[0], d_out.scale(*factor)?);
                }
            }
        }
        Ok(())
    }
}

/// Write `src` into the slice window of `dst` (inverse of Tensor::slice).
fn scatter_slice(dst: &mut Tensor, src: &Tensor, axis: usize, start: usize, len: usize) {
    let shape = dst.shape().to_vec();
    match (shape.len(), axis) {
        (1, 0) => {
            dst.data_mut()[start..start + len].copy_from_slice(src.data());
        }
        (2, 0) => {
            let cols = shape[1];
            dst.data_mut()[start * cols..(start + len) * cols].copy_from_slice(src.data());
        }
        (2, 1) => {
            let cols = shape[1];
            for i in 0..shape[0] {
                dst.data_mut()[i * cols + start..i * cols + start + len]
                    .copy_from_slice(&src.data()[i * len..(i + 1) * len]);
            }
        }
        _ => unreachable!("slice only supports rank <= 2"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences of `f` w.r.t. the entries of `x`.
    fn finite_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut grad = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn assert_grad_close(ad: &Tensor, fd: &Tensor, ctx: &str) {
        assert_eq!(ad.shape(), fd.shape(), "{ctx}: shape");
        for (i, (a, b)) in ad.data().iter().zip(fd.data().iter()).enumerate() {
            assert!(
                rel_err(*a, *b) < 1e-4,
                "{ctx}[{i}]: ad={a} fd={b} rel={}",
                rel_err(*a, *b)
            );
        }
    }

    #[test]
    fn d_square_at_3() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn d_mean_is_one_over_n() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.mean(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 5.0);
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // y = x*x + x  =>  dy/dx = 2x + 1 = 7 at x=3
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 7.0);
    }

    #[test]
    fn replay_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x_val = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w_val = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(x_val.clone());
            let w = tape.param(w_val.clone());
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h).unwrap();
            let l = tape.mean(a).unwrap();
            let g = tape.backward(l).unwrap();
            (
                tape.value(l).item().unwrap(),
                g.get(w).unwrap().clone(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    /// Every supported op against central finite differences on random
    /// inputs in [-2, 2].
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rand_tensor = |shape: &[usize]| {
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };

        // Each case: name, input shapes, graph builder over those inputs.
        type Builder = fn(&mut Tape, &[NodeId]) -> NodeId;
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("add", vec![vec![2, 3], vec![2, 3]], |t, xs| {
                t.add(xs[0], xs[1]).unwrap()
            }),
            ("sub", vec![vec![2, 3], vec![2, 3]], |t, xs| {
                t.sub(xs[0], xs[1]).unwrap()
            }),
            ("mul", vec![vec![5], vec![5]], |t, xs| {
                t.mul(xs[0], xs[1]).unwrap()
            }),
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, xs| {
                t.matmul(xs[0], xs[1]).unwrap()
            }),
            (
                "affine",
                vec![vec![3, 4], vec![4, 2], vec![2]],
                |t, xs| t.affine(xs[0], xs[1], xs[2]).unwrap(),
            ),
            ("tanh", vec![vec![2, 3]], |t, xs| t.tanh(xs[0]).unwrap()),
            ("exp", vec![vec![6]], |t, xs| t.exp(xs[0]).unwrap()),
            ("square", vec![vec![4]], |t, xs| t.square(xs[0]).unwrap()),
            ("mean", vec![vec![3, 3]], |t, xs| t.mean(xs[0]).unwrap()),
            ("sum", vec![vec![7]], |t, xs| t.sum(xs[0]).unwrap()),
            ("concat0", vec![vec![2, 3], vec![1, 3]], |t, xs| {
                t.concat(0, xs).unwrap()
            }),
            ("concat1", vec![vec![2, 2], vec![2, 3]], |t, xs| {
                t.concat(1, xs).unwrap()
            }),
            ("slice", vec![vec![3, 4]], |t, xs| {
                t.slice(xs[0], 1, 1, 2).unwrap()
            }),
            ("scale", vec![vec![5]], |t, xs| t.scale(xs[0], -1.7).unwrap()),
        ];

        for (name, shapes, build) in cases {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s)).collect();
            // Reduce with sum-of-squares to a scalar so every output entry
            // influences the loss nonlinearly.
            let eval = |tensors: &[Tensor]| -> (f64, Vec<Tensor>) {
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = tensors.iter().map(|t| tape.param(t.clone())).collect();
                let out = build(&mut tape, &ids);
                let sq = tape.square(out).unwrap();
                let loss = tape.sum(sq).unwrap();
                let grads = tape.backward(loss).unwrap();
                (
                    tape.value(loss).item().unwrap(),
                    ids.iter().map(|id| grads.get(*id).unwrap().clone()).collect(),
                )
            };
            let (_, ad_grads) = eval(&inputs);
            for arg in 0..inputs.len() {
                let fd = finite_diff(&inputs[arg], &|perturbed: &Tensor| {
                    let mut probe = inputs.clone();
                    probe[arg] = perturbed.clone();
                    eval(&probe).0
                });
                assert_grad_close(&ad_grads[arg], &fd, &format!("{name} arg{arg}"));
            }
        }

        // log and relu need constrained inputs: positive for log, away from
        // the kink for relu.
        let log_in = Tensor::new(vec![4], vec![0.5, 1.3, 0.2, 1.9]).unwrap();
        let relu_in = Tensor::new(vec![4], vec![-1.5, 0.7, 1.2, -0.4]).unwrap();
        for (name, input, build) in [
            ("log", log_in, Op::Log),
            ("relu", relu_in, Op::Relu),
        ] {
            let eval = |x: &Tensor| -> (f64, Tensor) {
                let mut tape = Tape::new();
                let id = tape.param(x.clone());
                let out = tape.apply(build.clone(), &[id]).unwrap();
                let sq = tape.square(out).unwrap();
                let loss = tape.sum(sq).unwrap();
                let grads = tape.backward(loss).unwrap();
                (
                    tape.value(loss).item().unwrap(),
                    grads.get(id).unwrap().clone(),
                )
            };
            let (_, ad) = eval(&input);
            let fd = finite_diff(&input, &|p: &Tensor| eval(p).0);
            assert_grad_close(&ad, &fd, name);
        }
    }
}
