//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to [`Var`]s while recording is
//! enabled. Values live behind `Rc`, so with recording disabled intermediate
//! activations are freed as soon as the caller drops them. Parameters enter
//! as leaves via [`Graph::leaf`]; [`Graph::backward`] returns gradients for
//! every leaf that influenced the output.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::conv::{self, ConvSpec};
use crate::kernels::norm::{self, BatchStats, BnSaved};
use crate::kernels::{pointwise, pool, resample};
use crate::tensor::Tensor;

const UNTRACKED: usize = usize::MAX;

/// A value on the tape.
#[derive(Clone)]
pub struct Var {
    id: usize,
    requires_grad: bool,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<usize> {
        (self.id != UNTRACKED).then_some(self.id)
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value.shape())
    }
}

/// An operand as seen by the tape: its node id (or `UNTRACKED`) and value.
#[derive(Clone)]
struct In {
    id: usize,
    value: Rc<Tensor>,
}

impl From<&Var> for In {
    fn from(v: &Var) -> Self {
        In {
            id: v.id,
            value: v.value.clone(),
        }
    }
}

enum Op {
    Leaf,
    Conv {
        x: In,
        w: In,
        b: Option<usize>,
        spec: ConvSpec,
    },
    BnTrain {
        x: usize,
        gamma: In,
        beta: usize,
        saved: BnSaved,
    },
    BnEval {
        x: usize,
        gamma: In,
        beta: usize,
        xhat: Tensor,
        running_var: Tensor,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Mul(In, In),
    AbsDiff(In, In),
    Scale(usize, f32),
    Concat(Vec<(usize, usize)>),
    Pick {
        x: usize,
        shape: Vec<usize>,
        arg: Vec<u32>,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Sum {
        x: usize,
        shape: Vec<usize>,
    },
    Bce {
        x: In,
        target: Tensor,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Not `Send`; build one per forward/backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording tape.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that records nothing (inference).
    pub fn no_grad() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = Rc::new(value);
        if !self.record || !requires_grad {
            return Var {
                id: UNTRACKED,
                requires_grad: false,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: value.clone(),
            op,
            requires_grad,
        });
        Var {
            id,
            requires_grad,
            value,
        }
    }

    /// A trainable input: gradients flow to it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input: never differentiated.
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            id: UNTRACKED,
            requires_grad: false,
            value: Rc::new(value),
        }
    }

    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, spec: ConvSpec) -> Var {
        let y = conv::conv2d(&x.value, &w.value, b.map(|b| &*b.value), spec);
        let rg = x.requires_grad || w.requires_grad || b.is_some_and(|b| b.requires_grad);
        self.push(
            y,
            Op::Conv {
                x: x.into(),
                w: w.into(),
                b: b.map(|b| b.id),
                spec,
            },
            rg,
        )
    }

    /// Batch-norm using the batch's own statistics; also returns them.
    pub fn batch_norm_train(&self, x: &Var, gamma: &Var, beta: &Var) -> (Var, BatchStats) {
        let (y, saved, stats) = norm::batch_norm_train(&x.value, &gamma.value, &beta.value);
        let rg = x.requires_grad || gamma.requires_grad || beta.requires_grad;
        let var = self.push(
            y,
            Op::BnTrain {
                x: x.id,
                gamma: gamma.into(),
                beta: beta.id,
                saved,
            },
            rg,
        );
        (var, stats)
    }

    /// Batch-norm using fixed running statistics.
    pub fn batch_norm_eval(&self, x: &Var, gamma: &Var, beta: &Var, running_mean: &Tensor, running_var: &Tensor) -> Var {
        let (y, xhat) = norm::batch_norm_eval(&x.value, &gamma.value, &beta.value, running_mean, running_var);
        let rg = x.requires_grad || gamma.requires_grad || beta.requires_grad;
        let xhat = if self.record && rg { xhat } else { Tensor::zeros(&[0]) };
        self.push(
            y,
            Op::BnEval {
                x: x.id,
                gamma: gamma.into(),
                beta: beta.id,
                xhat,
                running_var: running_var.clone(),
            },
            rg,
        )
    }

    pub fn relu(&self, x: &Var) -> Var {
        // `f32::max` would turn NaN into 0 and hide a diverged activation.
        self.push(x.value.map(|v| if v < 0.0 { 0.0 } else { v }), Op::Relu(x.id), x.requires_grad)
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        self.push(x.value.map(pointwise::sigmoid), Op::Sigmoid(x.id), x.requires_grad)
    }

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let mut y = (*a.value).clone();
        y.add_assign(&b.value);
        self.push(y, Op::Add(a.id, b.id), a.requires_grad || b.requires_grad)
    }

    /// Product with broadcasting of size-1 dims in either operand.
    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let y = pointwise::mul_broadcast(&a.value, &b.value);
        self.push(y, Op::Mul(a.into(), b.into()), a.requires_grad || b.requires_grad)
    }

    /// `|a - b|` element-wise.
    pub fn abs_diff(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "abs_diff: shape mismatch");
        let data = a.value.data().iter().zip(b.value.data()).map(|(x, y)| (x - y).abs()).collect();
        let y = Tensor::from_vec(a.shape(), data);
        self.push(y, Op::AbsDiff(a.into(), b.into()), a.requires_grad || b.requires_grad)
    }

    pub fn scale(&self, x: &Var, s: f32) -> Var {
        self.push(x.value.map(|v| v * s), Op::Scale(x.id, s), x.requires_grad)
    }

    pub fn concat(&self, parts: &[&Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &*p.value).collect();
        let y = pointwise::concat_channels(&tensors);
        let rg = parts.iter().any(|p| p.requires_grad);
        self.push(y, Op::Concat(parts.iter().map(|p| (p.id, p.shape()[1])).collect()), rg)
    }

    pub fn max_pool2(&self, x: &Var) -> Var {
        let (y, arg) = pool::max_pool2(&x.value);
        self.push(y, Op::Pick { x: x.id, shape: x.shape().to_vec(), arg }, x.requires_grad)
    }

    pub fn global_max_pool(&self, x: &Var) -> Var {
        let (y, arg) = pool::global_max_pool(&x.value);
        self.push(y, Op::Pick { x: x.id, shape: x.shape().to_vec(), arg }, x.requires_grad)
    }

    pub fn channel_max(&self, x: &Var) -> Var {
        let (y, arg) = pool::channel_max(&x.value);
        self.push(y, Op::Pick { x: x.id, shape: x.shape().to_vec(), arg }, x.requires_grad)
    }

    pub fn upsample(&self, x: &Var, factor: usize) -> Var {
        if factor == 1 {
            return x.clone();
        }
        let y = resample::upsample_bilinear(&x.value, factor);
        self.push(y, Op::Upsample { x: x.id, factor }, x.requires_grad)
    }

    /// Sum of all elements (accumulated in f64), as a one-element tensor.
    pub fn sum(&self, x: &Var) -> Var {
        let y = Tensor::scalar(x.value.sum() as f32);
        self.push(y, Op::Sum { x: x.id, shape: x.shape().to_vec() }, x.requires_grad)
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and `target`.
    pub fn bce_with_logits(&self, x: &Var, target: &Tensor) -> Var {
        assert_eq!(x.shape(), target.shape(), "bce: shape mismatch");
        let loss = crate::trainer::loss::bce_with_logits_value(x.value.data(), target.data());
        self.push(
            Tensor::scalar(loss as f32),
            Op::Bce {
                x: x.into(),
                target: target.clone(),
            },
            x.requires_grad,
        )
    }

    /// Back-propagates from a one-element output. Gradients of interior
    /// nodes are released as soon as they have been consumed.
    pub fn backward(&self, output: &Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if output.id == UNTRACKED {
            return Gradients { grads };
        }
        assert_eq!(output.value.len(), 1, "backward needs a scalar output");
        grads[output.id] = Some(Tensor::full(output.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let wants = |i: usize| i != UNTRACKED && nodes[i].requires_grad;
            let mut send = |i: usize, g: Tensor| {
                if !wants(i) {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, spec } => {
                    let (dx, dw, db) =
                        conv::conv2d_backward(&x.value, &w.value, &gy, *spec, wants(x.id), b.is_some_and(wants));
                    if let Some(dx) = dx {
                        send(x.id, dx);
                    }
                    send(w.id, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        send(*b, db);
                    }
                }
                Op::BnTrain { x, gamma, beta, saved } => {
                    let (dx, dg, db) = norm::batch_norm_train_backward(&gy, &gamma.value, saved);
                    send(*x, dx);
                    send(gamma.id, dg);
                    send(*beta, db);
                }
                Op::BnEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    running_var,
                } => {
                    let (dx, dg, db) = norm::batch_norm_eval_backward(&gy, xhat, &gamma.value, running_var);
                    send(*x, dx);
                    send(gamma.id, dg);
                    send(*beta, db);
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let data = gy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(*x, Tensor::from_vec(gy.shape(), data));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let data = gy.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    send(*x, Tensor::from_vec(gy.shape(), data));
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        send(*a, gy.clone());
                    }
                    send(*b, gy);
                }
                Op::Mul(a, b) => {
                    if wants(a.id) {
                        let full = pointwise::mul_broadcast(&gy, &b.value);
                        send(a.id, pointwise::reduce_to(&full, a.value.shape()));
                    }
                    if wants(b.id) {
                        let full = pointwise::mul_broadcast(&gy, &a.value);
                        send(b.id, pointwise::reduce_to(&full, b.value.shape()));
                    }
                }
                Op::AbsDiff(a, b) => {
                    let da: Vec<f32> = gy
                        .data()
                        .iter()
                        .zip(a.value.data().iter().zip(b.value.data()))
                        .map(|(g, (x, y))| g * sgn(x - y))
                        .collect();
                    if wants(b.id) {
                        send(b.id, Tensor::from_vec(gy.shape(), da.iter().map(|v| -v).collect()));
                    }
                    send(a.id, Tensor::from_vec(gy.shape(), da));
                }
                Op::Scale(x, s) => send(*x, gy.map(|v| v * s)),
                Op::Concat(parts) => {
                    let channels: Vec<usize> = parts.iter().map(|p| p.1).collect();
                    for (p, g) in parts.iter().zip(pointwise::split_channels(&gy, &channels)) {
                        send(p.0, g);
                    }
                }
                Op::Pick { x, shape, arg } => send(*x, pool::scatter_argmax(&gy, arg, shape)),
                Op::Upsample { x, factor } => send(*x, resample::upsample_bilinear_backward(&gy, *factor)),
                Op::Sum { x, shape } => send(*x, Tensor::full(shape, gy.data()[0])),
                Op::Bce { x, target } => {
                    let n = x.value.len() as f32;
                    let scale = gy.data()[0] / n;
                    let data = x
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&l, &t)| (pointwise::sigmoid(l) - t) * scale)
                        .collect();
                    send(x.id, Tensor::from_vec(x.value.shape(), data));
                }
            }
        }
        Gradients { grads }
    }
}

fn sgn(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    /// Checks d/dx sum(r * f(x)) against central differences for every
    /// element of every input.
    fn check(inputs: &[Tensor], f: impl Fn(&Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let g = Graph::no_grad();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars).value().clone()
        };
        let weights = random(probe.shape(), &mut rng);
        let objective = |ins: &[Tensor]| -> f64 {
            let g = Graph::no_grad();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let y = f(&g, &vars);
            y.value().data().iter().zip(weights.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&g, &vars);
        let w = g.constant(weights.clone());
        let total = g.sum(&g.mul(&y, &w));
        let grads = g.backward(&total);
        let h = 1e-2f32;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(&vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                let a = analytic.data()[i] as f64;
                assert!(
                    (a - numeric).abs() <= 2e-3 + 2e-3 * numeric.abs(),
                    "input {k}[{i}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [ConvSpec::same(3), ConvSpec::dilated(3, 2), ConvSpec::rect(1, 3), ConvSpec::same(1)] {
            let (kh, kw) = spec.kernel;
            let ins = [random(&[2, 2, 4, 5], &mut rng), random(&[3, 2, kh, kw], &mut rng), random(&[3], &mut rng)];
            check(&ins, |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), spec));
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = [random(&[2, 3, 2, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
        check(&ins, |g, v| g.batch_norm_train(&v[0], &v[1], &v[2]).0);
        let rm = random(&[3], &mut rng);
        let rv = Tensor::from_vec(&[3], vec![0.5, 1.0, 2.0]);
        check(&ins, |g, v| g.batch_norm_eval(&v[0], &v[1], &v[2], &rm, &rv));
    }

    #[test]
    fn pointwise_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let gate_c = random(&[2, 3, 1, 1], &mut rng);
        let gate_s = random(&[2, 1, 2, 2], &mut rng);
        check(&[x.clone(), gate_c], |g, v| g.mul(&v[0], &g.sigmoid(&v[1])));
        check(&[x.clone(), gate_s], |g, v| g.mul(&g.relu(&v[0]), &v[1]));
        let y = random(&[2, 3, 2, 2], &mut rng);
        check(&[x.clone(), y.clone()], |g, v| g.abs_diff(&v[0], &v[1]));
        check(&[x.clone(), y.clone()], |g, v| g.scale(&g.add(&v[0], &v[1]), 0.3));
        check(&[x.clone(), y], |g, v| g.concat(&[&v[1], &v[0], &v[1]]));
    }

    #[test]
    fn pooling_and_resampling_gradients() {
        use rand::seq::SliceRandom;
        // Distinct values spaced well beyond the difference step so no max flips.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut values: Vec<f32> = (0..96).map(|i| i as f32 * 0.1 - 4.8).collect();
        values.shuffle(&mut rng);
        let x = Tensor::from_vec(&[2, 3, 4, 4], values);
        check(&[x.clone()], |g, v| g.max_pool2(&v[0]));
        check(&[x.clone()], |g, v| g.global_max_pool(&v[0]));
        check(&[x.clone()], |g, v| g.channel_max(&v[0]));
        check(&[x.clone()], |g, v| g.upsample(&v[0], 2));
        check(&[x], |g, v| g.upsample(&v[0], 4));
    }

    #[test]
    fn bce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 1, 3, 3], &mut rng);
        let t = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 1.0, 0.5, 0.2, 1.0, 0.0, 0.9, 0.1, 1.0]);
        check(&[x], |g, v| g.bce_with_logits(&v[0], &t));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, -2.0]));
        let y = g.add(&x, &g.scale(&x, 2.0));
        let grads = g.backward(&g.sum(&y));
        assert_eq!(grads.get(&x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let g = Graph::no_grad();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let _ = g.relu(&g.sigmoid(&x));
        assert!(g.is_empty());
    }
}
