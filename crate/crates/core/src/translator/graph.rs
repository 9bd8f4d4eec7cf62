//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape once in reverse and accumulates gradients into the parents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::kernels::{self, ConvGeometry};
use super::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("non-finite value produced by {op} ({label})")]
    NonFinite { op: &'static str, label: String },
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn test_new(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Concat { a: Var, b: Var, ca: usize },
    /// Elementwise multiply by a fixed (already scaled) mask.
    Mask { input: Var, mask: Vec<T> },
    Add(Var, Var),
    Scale(Var, T),
    /// Mean of `|a - b|` over all elements.
    L1 { a: Var, b: Var },
    /// Mean of `(a - b)^2` over all elements.
    L2 { a: Var, b: Var },
    /// Mean of `ln(clamp(x))` or `ln(1 - clamp(x))` with `clamp` into `[eps, 1 - eps]`.
    MeanLog { input: Var, complement: bool, eps: T },
    /// `(N, C, H, W) -> (N, C, 1, 1)`.
    GlobalAvgPool(Var),
    /// Mean softmax cross-entropy of `(N, K, 1, 1)` logits against class indices.
    SoftmaxXent { logits: Var, labels: Vec<usize> },
    /// `sum(input * weights)` for a fixed weight tensor.
    Dot { input: Var, weights: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2(_) => "upsample2",
            Op::Concat { .. } => "concat",
            Op::Mask { .. } => "dropout",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::L1 { .. } => "l1",
            Op::L2 { .. } => "l2",
            Op::MeanLog { .. } => "mean_log",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    label: String,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, label: &str) -> Result<Var, GraphError> {
        if self.check_finite && !value.all_finite() {
            return Err(GraphError::NonFinite {
                op: op.name(),
                label: label.to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            label: label.to_string(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inputs, targets and parameters all enter as leaves.
    pub fn leaf(&mut self, value: Tensor<T>, label: &str) -> Result<Var, GraphError> {
        self.push(value, Op::Leaf, label)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeometry, label: &str) -> Result<Var, GraphError> {
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), self.value(bias), geom);
        self.push(out, Op::Conv2d { input, weight, bias, geom }, label)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GraphError> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let label = self.nodes[x.0].label.clone();
        self.push(out, Op::Relu(x), &label)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, GraphError> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let label = self.nodes[x.0].label.clone();
        self.push(out, Op::Sigmoid(x), &label)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var, GraphError> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(x));
        let label = self.nodes[x.0].label.clone();
        self.push(out, Op::MaxPool2 { input: x, argmax }, &label)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var, GraphError> {
        let out = kernels::upsample2_forward(self.value(x));
        let label = self.nodes[x.0].label.clone();
        self.push(out, Op::Upsample2(x), &label)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let ca = self.value(a).dims4().1;
        let out = kernels::concat_channels(self.value(a), self.value(b));
        self.push(out, Op::Concat { a, b, ca }, "concat")
    }

    /// Multiplies by a precomputed mask (e.g. an inverted-dropout mask).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var, GraphError> {
        assert_eq!(mask.len(), self.value(x).len(), "mask length mismatch");
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data);
        let label = self.nodes[x.0].label.clone();
        self.push(out, Op::Mask { input: x, mask }, &label)
    }

    /// Inverted dropout with drop probability `p`; the mask is drawn from `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var, GraphError> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let scale = T::lit(1.0 / keep);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen_bool(keep) { scale } else { T::zero() })
            .collect();
        self.mask(x, mask)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add needs equal shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var, GraphError> {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), "scale")
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l1 needs equal shapes");
        let n = T::lit(va.len() as f64);
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        self.push(Tensor::scalar(s / n), Op::L1 { a, b }, "l1")
    }

    pub fn l2(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l2 needs equal shapes");
        let n = T::lit(va.len() as f64);
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::L2 { a, b }, "l2")
    }

    pub fn mean_log(&mut self, x: Var, complement: bool, eps: f64) -> Result<Var, GraphError> {
        let eps = T::lit(eps);
        let v = self.value(x);
        let n = T::lit(v.len() as f64);
        let s: T = v
            .data()
            .iter()
            .map(|&d| {
                let c = d.max(eps).min(T::one() - eps);
                if complement {
                    (T::one() - c).ln()
                } else {
                    c.ln()
                }
            })
            .sum();
        self.push(Tensor::scalar(s / n), Op::MeanLog { input: x, complement, eps }, "mean_log")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, GraphError> {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = T::lit((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        self.push(Tensor::new(vec![n, c, 1, 1], data), Op::GlobalAvgPool(x), "gap")
    }

    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var, GraphError> {
        let (n, k, h, w) = self.value(logits).dims4();
        assert_eq!((h, w), (1, 1), "logits must be (N, K, 1, 1)");
        assert_eq!(labels.len(), n, "one label per sample");
        let z = self.value(logits).data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "label {y} out of range for {k} classes");
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total = total + lse - row[y];
        }
        let loss = total / T::lit(n as f64);
        self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, labels }, "softmax_xent")
    }

    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var, GraphError> {
        assert_eq!(self.value(x).shape(), weights.shape(), "dot needs equal shapes");
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::Dot { input: x, weights }, "dot")
    }

    /// Activation pattern of every piecewise-linear op (ReLU signs, pooling
    /// winners, L1 difference signs). Finite differences are only meaningful
    /// between points that share a pattern.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        let sign = |v: T| if v > T::zero() { 2 } else if v < T::zero() { 0 } else { 1 };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.value(*x).data().iter().map(|&v| sign(v))),
                Op::MaxPool2 { argmax, .. } => sig.extend(argmax.iter().map(|&i| i as u64)),
                Op::L1 { a, b } => sig.extend(
                    self.value(*a)
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| sign(x - y)),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Gradients of the scalar `loss` with respect to every leaf; entries for
    /// leaves that do not influence `loss` stay `None`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let mut send = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, weight, bias, geom } => {
                    let (gi, gw, gb) = kernels::conv2d_backward(self.value(*input), self.value(*weight), &g, *geom);
                    send(*input, gi);
                    send(*weight, gw);
                    send(*bias, gb);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(*x, Tensor::new(xv.shape().to_vec(), data));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect();
                    send(*x, Tensor::new(y.shape().to_vec(), data));
                }
                Op::MaxPool2 { input, argmax } => {
                    send(*input, kernels::maxpool2_backward(self.value(*input).shape(), argmax, &g));
                }
                Op::Upsample2(x) => send(*x, kernels::upsample2_backward(&g)),
                Op::Concat { a, b, ca } => {
                    let (ga, gb) = kernels::split_channels(&g, *ca);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Mask { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    send(*input, Tensor::new(g.shape().to_vec(), data));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Scale(x, k) => send(*x, g.map(|v| v * *k)),
                Op::L1 { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = g.item() / T::lit(va.len() as f64);
                    let da: Vec<T> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| {
                            let d = x - y;
                            if d > T::zero() {
                                k
                            } else if d < T::zero() {
                                -k
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let db = da.iter().map(|&v| -v).collect();
                    send(*a, Tensor::new(va.shape().to_vec(), da));
                    send(*b, Tensor::new(vb.shape().to_vec(), db));
                }
                Op::L2 { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = T::lit(2.0) * g.item() / T::lit(va.len() as f64);
                    let da: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| k * (x - y)).collect();
                    let db = da.iter().map(|&v| -v).collect();
                    send(*a, Tensor::new(va.shape().to_vec(), da));
                    send(*b, Tensor::new(vb.shape().to_vec(), db));
                }
                Op::MeanLog { input, complement, eps } => {
                    let v = self.value(*input);
                    let k = g.item() / T::lit(v.len() as f64);
                    let data = v
                        .data()
                        .iter()
                        .map(|&d| {
                            if d < *eps || d > T::one() - *eps {
                                T::zero()
                            } else if *complement {
                                -k / (T::one() - d)
                            } else {
                                k / d
                            }
                        })
                        .collect();
                    send(*input, Tensor::new(v.shape().to_vec(), data));
                }
                Op::GlobalAvgPool(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let hw = T::lit((h * w) as f64);
                    let mut data = Vec::with_capacity(n * c * h * w);
                    for &gv in g.data() {
                        data.extend(std::iter::repeat(gv / hw).take(h * w));
                    }
                    send(*x, Tensor::new(vec![n, c, h, w], data));
                }
                Op::SoftmaxXent { logits, labels } => {
                    let zv = self.value(*logits);
                    let (n, k, _, _) = zv.dims4();
                    let scale = g.item() / T::lit(n as f64);
                    let mut data = Vec::with_capacity(n * k);
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &zv.data()[i * k..(i + 1) * k];
                        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let denom: T = row.iter().map(|&v| (v - m).exp()).sum();
                        for (j, &v) in row.iter().enumerate() {
                            let p = (v - m).exp() / denom;
                            let target = if j == y { T::one() } else { T::zero() };
                            data.push(scale * (p - target));
                        }
                    }
                    send(*logits, Tensor::new(zv.shape().to_vec(), data));
                }
                Op::Dot { input, weights } => send(*input, weights.map(|w| w * g.item())),
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}
