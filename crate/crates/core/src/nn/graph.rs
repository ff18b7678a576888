//! Recorded computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use super::ops;
use super::{NnError, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d {
        inputs: Vec<Var>,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Prelu {
        input: Var,
        slopes: Var,
    },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        targets: Tensor,
    },
    /// Cross-entropy on the output of a softmax node; gradient `(p − y)/N`
    /// goes straight to the logits.
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Var,
        targets: Tensor,
    },
    Sum(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Square(Var),
    Dot {
        input: Var,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf. Gradients reaching it are recorded but go nowhere.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// A leaf bound to a named parameter of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NnError> {
        let idx = store.index_of(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        Ok(self.push(store.value_at(idx).clone(), Op::Param(idx)))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var, NnError> {
        self.conv2d_concat(&[input], weight, bias, stride)
    }

    /// Convolution over the channel concatenation of `inputs`. Only 1×1 and
    /// 3×3 kernels are supported, both with same-padding.
    pub fn conv2d_concat(&mut self, inputs: &[Var], weight: Var, bias: Option<Var>, stride: usize) -> Result<Var, NnError> {
        let k = self.value(weight).dims().get(2).copied().unwrap_or(0);
        if k != 1 && k != 3 {
            return Err(NnError::shape("conv2d", format!("only 1x1 and 3x3 kernels, got {k}")));
        }
        let pad = ops::same_padding(k);
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::conv2d_parts(&parts, self.value(weight), bias.map(|b| self.value(b)), stride, pad)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                inputs: inputs.to_vec(),
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn prelu(&mut self, input: Var, slopes: Var) -> Result<Var, NnError> {
        let out = ops::prelu(self.value(input), self.value(slopes))?;
        Ok(self.push(out, Op::Prelu { input, slopes }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn avg_pool2x2(&mut self, input: Var) -> Result<Var, NnError> {
        let out = ops::avg_pool2x2(self.value(input))?;
        Ok(self.push(out, Op::AvgPool2(input)))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, NnError> {
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, NnError> {
        let out = ops::fully_connected(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::FullyConnected { input, weight, bias }))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var, NnError> {
        let out = ops::softmax(self.value(input))?;
        Ok(self.push(out, Op::Softmax(input)))
    }

    /// Mean cross-entropy of `probs` against `targets`. When `probs` was
    /// produced by [`Graph::softmax`] the fused softmax + cross-entropy
    /// gradient is used.
    pub fn cross_entropy(&mut self, probs: Var, targets: Tensor) -> Result<Var, NnError> {
        let loss = ops::cross_entropy(self.value(probs), &targets)?;
        let op = match self.nodes[probs.0].op {
            Op::Softmax(logits) => Op::SoftmaxCrossEntropy { logits, probs, targets },
            _ => Op::CrossEntropy { probs, targets },
        };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let v = self.value(input);
        let out = Tensor::new(v.dims().to_vec(), v.data().iter().map(|x| x * factor).collect()).expect("same shape");
        self.push(out, Op::Scale(input, factor))
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dims() != y.dims() {
            return Err(NnError::shape("add", format!("{:?} vs {:?}", x.dims(), y.dims())));
        }
        let out = Tensor::new(x.dims().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect())?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn square(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let out = Tensor::new(v.dims().to_vec(), v.data().iter().map(|x| x * x).collect()).expect("same shape");
        self.push(out, Op::Square(input))
    }

    /// `Σ input ⊙ weights` for a constant weight tensor of the same size.
    pub fn dot(&mut self, input: Var, weights: Tensor) -> Result<Var, NnError> {
        let v = self.value(input);
        if v.len() != weights.len() {
            return Err(NnError::shape("dot", format!("{:?} vs {:?}", v.dims(), weights.dims())));
        }
        let s = v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, weights }))
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Propagate d(loss)/d(node) for every node and add parameter gradients
    /// into `store`. Gradients in `store` accumulate across calls until
    /// [`ParamStore::zero_grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NnError> {
        let loss_node = self.nodes.get(loss.0).ok_or(NnError::NoGraph)?;
        if matches!(loss_node.op, Op::Input | Op::Param(_)) {
            return Err(NnError::NoGraph);
        }
        if loss_node.value.len() != 1 {
            return Err(NnError::shape("backward", format!("loss must be scalar, got {:?}", loss_node.value.dims())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(idx) => store.add_grad(*idx, &g)?,
                Op::Conv2d {
                    inputs,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let cg = ops::conv2d_backward(&parts, self.value(*weight), *stride, *pad, &g)?;
                    for (v, gi) in inputs.iter().zip(cg.inputs) {
                        Self::accumulate(&mut grads, *v, gi);
                    }
                    Self::accumulate(&mut grads, *weight, cg.weight);
                    if let Some(b) = bias {
                        Self::accumulate(&mut grads, *b, cg.bias);
                    }
                }
                Op::Prelu { input, slopes } => {
                    let (gi, ga) = ops::prelu_backward(self.value(*input), self.value(*slopes), &g)?;
                    Self::accumulate(&mut grads, *input, gi);
                    Self::accumulate(&mut grads, *slopes, ga);
                }
                Op::Relu(input) => {
                    let gi = ops::relu_backward(self.value(*input), &g);
                    Self::accumulate(&mut grads, *input, gi);
                }
                Op::AvgPool2(input) => {
                    let gi = ops::avg_pool2x2_backward(self.value(*input).dims(), &g);
                    Self::accumulate(&mut grads, *input, gi);
                }
                Op::GlobalAvgPool(input) => {
                    let gi = ops::global_avg_pool_backward(self.value(*input).dims(), &g);
                    Self::accumulate(&mut grads, *input, gi);
                }
                Op::Concat(parts) => {
                    let dims = node.value.dims();
                    let channels: Vec<usize> = parts.iter().map(|p| self.value(*p).dims()[1]).collect();
                    let split = ops::concat_channels_backward(&channels, dims[0], dims[2] * dims[3], &g);
                    for (p, gp) in parts.iter().zip(split) {
                        Self::accumulate(&mut grads, *p, gp);
                    }
                }
                Op::FullyConnected { input, weight, bias } => {
                    let (gi, gw, gb) = ops::fully_connected_backward(self.value(*input), self.value(*weight), &g);
                    Self::accumulate(&mut grads, *input, gi);
                    Self::accumulate(&mut grads, *weight, gw);
                    if let Some(b) = bias {
                        Self::accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Softmax(input) => {
                    let gi = ops::softmax_backward(&node.value, &g);
                    Self::accumulate(&mut grads, *input, gi);
                }
                Op::CrossEntropy { probs, targets } => {
                    let p = self.value(*probs);
                    let n = p.dims()[0] as f64;
                    let gi = p
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&pv, &y)| if y != 0.0 { -g[0] * y / (n * pv) } else { 0.0 })
                        .collect();
                    Self::accumulate(&mut grads, *probs, gi);
                }
                Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                    let p = self.value(*probs);
                    let n = p.dims()[0] as f64;
                    let k = p.dims()[1];
                    let scale = g[0] / n;
                    let gi = p
                        .data()
                        .chunks(k)
                        .zip(targets.data().chunks(k))
                        .flat_map(|(pr, yr)| {
                            let ysum: f64 = yr.iter().sum();
                            pr.iter()
                                .zip(yr)
                                .map(move |(&pv, &y)| scale * (ysum * pv - y))
                                .collect::<Vec<_>>()
                        })
                        .collect();
                    Self::accumulate(&mut grads, *logits, gi);
                }
                Op::Sum(input) => {
                    let n = self.value(*input).len();
                    Self::accumulate(&mut grads, *input, vec![g[0]; n]);
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, *a, g.clone());
                    Self::accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(input, factor) => {
                    let gi = g.iter().map(|d| d * factor).collect();
                    Self::accumulate(&mut grads, *input, gi);
                }
                Op::Square(input) => {
                    let gi = self.value(*input).data().iter().zip(&g).map(|(x, d)| 2.0 * x * d).collect();
                    Self::accumulate(&mut grads, *input, gi);
                }
                Op::Dot { input, weights } => {
                    let gi = weights.data().iter().map(|w| w * g[0]).collect();
                    Self::accumulate(&mut grads, *input, gi);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}
