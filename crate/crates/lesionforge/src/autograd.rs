//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A forward pass pushes one node per primitive op; `backward` replays the
//! tape in exact reverse order and accumulates dLoss/dValue for every value.
//! Tapes are multi-use: `backward` is a pure function of the recorded pass,
//! so repeated calls return identical gradients.

use crate::error::{Error, Result};
use crate::nn::{self, BnBatchStats, BnParams};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Op<E: Element> {
    Leaf,
    Conv2d {
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Dense,
    Relu,
    Sigmoid,
    Softmax {
        probs: Tensor<E>,
    },
    Add,
    BnTrain {
        stats: BnBatchStats<E>,
    },
    BnEval {
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
        eps: E,
    },
    MaxPool {
        k: usize,
        stride: usize,
        padding: usize,
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    GlobalAvgPool {
        in_shape: Vec<usize>,
    },
    Upsample {
        factor: usize,
        in_shape: Vec<usize>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    SumAll {
        in_shape: Vec<usize>,
    },
    Scale {
        factor: E,
    },
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
        probs: Tensor<E>,
    },
    /// loss = scale * 1/2 * sum((y - x)^2); inputs are [y, x].
    ReconSum {
        scale: E,
    },
}

struct Node<E: Element> {
    op: Op<E>,
    inputs: Vec<usize>,
    out: usize,
}

/// Ordered record of one forward pass plus all intermediate values.
pub struct Tape<E: Element> {
    values: Vec<Tensor<E>>,
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
        }
    }

    fn push_value(&mut self, t: Tensor<E>) -> usize {
        self.values.push(t);
        self.values.len() - 1
    }

    fn push_node(&mut self, op: Op<E>, inputs: Vec<usize>, out: Tensor<E>) -> ValueId {
        let out_idx = self.push_value(out);
        self.nodes.push(Node {
            op,
            inputs,
            out: out_idx,
        });
        ValueId(out_idx)
    }

    /// Register an input or parameter value. Leaves have no recorded op.
    pub fn leaf(&mut self, t: Tensor<E>) -> ValueId {
        let idx = self.push_value(t);
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            out: idx,
        });
        ValueId(idx)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let out = nn::conv2d_forward(
            &self.values[input.0],
            &self.values[kernel.0],
            bias.map(|b| &self.values[b.0]),
            stride,
            padding,
        )?;
        let mut inputs = vec![input.0, kernel.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        Ok(self.push_node(
            Op::Conv2d {
                stride,
                padding,
                has_bias: bias.is_some(),
            },
            inputs,
            out,
        ))
    }

    pub fn dense(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        let out = nn::dense_forward(
            &self.values[input.0],
            &self.values[weight.0],
            &self.values[bias.0],
        )?;
        Ok(self.push_node(Op::Dense, vec![input.0, weight.0, bias.0], out))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = nn::relu_forward(&self.values[input.0]);
        self.push_node(Op::Relu, vec![input.0], out)
    }

    pub fn sigmoid(&mut self, input: ValueId) -> ValueId {
        let out = nn::sigmoid_forward(&self.values[input.0]);
        self.push_node(Op::Sigmoid, vec![input.0], out)
    }

    pub fn softmax(&mut self, input: ValueId) -> Result<ValueId> {
        let out = nn::softmax_rows(&self.values[input.0])?;
        Ok(self.push_node(
            Op::Softmax { probs: out.clone() },
            vec![input.0],
            out,
        ))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push_node(Op::Add, vec![a.0, b.0], out))
    }

    /// Train-mode batch norm; returns the output id and the batch statistics
    /// so the caller can fold them into running averages after the step.
    pub fn batchnorm_train(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: E,
    ) -> Result<(ValueId, BnBatchStats<E>)> {
        let (out, stats) = nn::batchnorm_train_forward(
            &self.values[input.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
        )?;
        let id = self.push_node(
            Op::BnTrain {
                stats: stats.clone(),
            },
            vec![input.0, gamma.0, beta.0],
            out,
        );
        Ok((id, stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: E,
    ) -> Result<ValueId> {
        let params = BnParams {
            gamma: self.values[gamma.0].clone(),
            beta: self.values[beta.0].clone(),
            running_mean: running_mean.clone(),
            running_var: running_var.clone(),
        };
        let out = nn::batchnorm_eval_forward(&self.values[input.0], &params, eps)?;
        Ok(self.push_node(
            Op::BnEval {
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
                eps,
            },
            vec![input.0, gamma.0, beta.0],
            out,
        ))
    }

    pub fn maxpool(
        &mut self,
        input: ValueId,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let in_shape = self.values[input.0].shape().to_vec();
        let (out, argmax) = nn::maxpool_forward(&self.values[input.0], k, stride, padding)?;
        Ok(self.push_node(
            Op::MaxPool {
                k,
                stride,
                padding,
                argmax,
                in_shape,
            },
            vec![input.0],
            out,
        ))
    }

    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId> {
        let in_shape = self.values[input.0].shape().to_vec();
        let out = nn::global_avg_pool_forward(&self.values[input.0])?;
        Ok(self.push_node(Op::GlobalAvgPool { in_shape }, vec![input.0], out))
    }

    pub fn upsample_nearest(&mut self, input: ValueId, factor: usize) -> Result<ValueId> {
        let in_shape = self.values[input.0].shape().to_vec();
        let out = nn::upsample_nearest_forward(&self.values[input.0], factor)?;
        Ok(self.push_node(Op::Upsample { factor, in_shape }, vec![input.0], out))
    }

    /// [N, ...] -> [N, prod(rest)]
    pub fn flatten(&mut self, input: ValueId) -> Result<ValueId> {
        let in_shape = self.values[input.0].shape().to_vec();
        if in_shape.is_empty() {
            return Err(Error::Dimension("cannot flatten a scalar".into()));
        }
        let n = in_shape[0];
        let rest: usize = in_shape[1..].iter().product();
        let out = self.values[input.0].reshaped(vec![n, rest])?;
        Ok(self.push_node(Op::Flatten { in_shape }, vec![input.0], out))
    }

    /// Reduce to a rank-0 scalar by summation.
    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let in_shape = self.values[input.0].shape().to_vec();
        let out = Tensor::scalar(self.values[input.0].sum());
        self.push_node(Op::SumAll { in_shape }, vec![input.0], out)
    }

    pub fn scale(&mut self, input: ValueId, factor: E) -> ValueId {
        let out = self.values[input.0].scale(factor);
        self.push_node(Op::Scale { factor }, vec![input.0], out)
    }

    /// Mean cross-entropy between logits and integer labels (scalar output).
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (loss, probs) = nn::softmax_cross_entropy_forward(&self.values[logits.0], labels)?;
        Ok(self.push_node(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits.0],
            Tensor::scalar(loss),
        ))
    }

    /// scale * 1/2 * sum((y - x)^2), a scalar. `scale` = 1 gives the literal
    /// reconstruction error; training uses scale = 1/batch.
    pub fn recon_sum(&mut self, y: ValueId, x: ValueId, scale: E) -> Result<ValueId> {
        let s = nn::recon_sum_pair(&self.values[y.0], &self.values[x.0])?;
        let loss = s * E::from_f64(0.5) * scale;
        Ok(self.push_node(Op::ReconSum { scale }, vec![y.0, x.0], Tensor::scalar(loss)))
    }

    #[doc(hidden)]
    pub fn debug_kink_nodes(&self) -> Vec<(usize, &'static str, f64)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Relu = &node.op {
                let m = self.values[node.inputs[0]]
                    .data()
                    .iter()
                    .map(|v| v.to_f64().abs())
                    .fold(f64::MAX, f64::min);
                out.push((i, "relu", m));
            }
        }
        out
    }

    /// Smallest distance from any recorded non-smooth switching point:
    /// min |relu input| and the min runner-up gap inside max-pool windows.
    /// Gradient checks require this to clear ~10x the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    for &v in self.values[node.inputs[0]].data() {
                        margin = margin.min(v.to_f64().abs());
                    }
                }
                Op::MaxPool {
                    k,
                    stride,
                    padding,
                    argmax,
                    in_shape,
                } => {
                    let x = &self.values[node.inputs[0]];
                    let (h, w) = (in_shape[2], in_shape[3]);
                    let (n, c) = (in_shape[0], in_shape[1]);
                    let ho = nn::conv_out_len(h, *k, *stride, *padding);
                    let wo = nn::conv_out_len(w, *k, *stride, *padding);
                    for ni in 0..n {
                        for ci in 0..c {
                            let in_base = (ni * c + ci) * h * w;
                            let out_base = (ni * c + ci) * ho * wo;
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let best_idx = argmax[out_base + oy * wo + ox];
                                    let best = x.data()[best_idx].to_f64();
                                    for ki in 0..*k {
                                        let iy =
                                            (oy * stride + ki) as isize - *padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..*k {
                                            let ix = (ox * stride + kj) as isize
                                                - *padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let idx =
                                                in_base + iy as usize * w + ix as usize;
                                            // Exact ties (e.g. relu-clamped zeros) are
                                            // locally constant plateaus, not kinks; the
                                            // relu margin guards the underlying switch.
                                            if idx != best_idx {
                                                let other = x.data()[idx].to_f64();
                                                if other != best {
                                                    margin = margin.min((best - other).abs());
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar loss. Returns dLoss/dValue for every
    /// recorded value; values off the path get zero gradients on request.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<E>> {
        let loss_val = &self.values[loss.0];
        if !loss_val.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(E::ONE));

        fn acc<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
            match slot {
                Some(existing) => {
                    *existing = existing.add(&g).expect("gradient shapes agree");
                }
                None => *slot = Some(g),
            }
        }

        for node in self.nodes.iter().rev() {
            let Some(dout) = grads[node.out].clone() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    stride,
                    padding,
                    has_bias,
                } => {
                    let g = nn::conv2d_backward(
                        &self.values[node.inputs[0]],
                        &self.values[node.inputs[1]],
                        *has_bias,
                        *stride,
                        *padding,
                        &dout,
                    )?;
                    acc(&mut grads[node.inputs[0]], g.input);
                    acc(&mut grads[node.inputs[1]], g.kernel);
                    if *has_bias {
                        acc(
                            &mut grads[node.inputs[2]],
                            g.bias.expect("bias gradient present"),
                        );
                    }
                }
                Op::Dense => {
                    let g = nn::dense_backward(
                        &self.values[node.inputs[0]],
                        &self.values[node.inputs[1]],
                        &dout,
                    )?;
                    acc(&mut grads[node.inputs[0]], g.input);
                    acc(&mut grads[node.inputs[1]], g.weight);
                    acc(&mut grads[node.inputs[2]], g.bias);
                }
                Op::Relu => {
                    let g = nn::relu_backward(&self.values[node.inputs[0]], &dout)?;
                    acc(&mut grads[node.inputs[0]], g);
                }
                Op::Sigmoid => {
                    let g = nn::sigmoid_backward(&self.values[node.out], &dout)?;
                    acc(&mut grads[node.inputs[0]], g);
                }
                Op::Softmax { probs } => {
                    // dx_j = p_j * (dy_j - sum_k dy_k p_k) per row
                    let (n, k) = probs.dims2("softmax probabilities")?;
                    let mut dx = vec![E::ZERO; n * k];
                    for row in 0..n {
                        let p = &probs.data()[row * k..(row + 1) * k];
                        let dy = &dout.data()[row * k..(row + 1) * k];
                        let mut dot = E::ZERO;
                        for j in 0..k {
                            dot += dy[j] * p[j];
                        }
                        for j in 0..k {
                            dx[row * k + j] = p[j] * (dy[j] - dot);
                        }
                    }
                    acc(
                        &mut grads[node.inputs[0]],
                        Tensor::from_vec(vec![n, k], dx)?,
                    );
                }
                Op::Add => {
                    acc(&mut grads[node.inputs[0]], dout.clone());
                    acc(&mut grads[node.inputs[1]], dout);
                }
                Op::BnTrain { stats } => {
                    let g = nn::batchnorm_train_backward(
                        &self.values[node.inputs[0]],
                        &self.values[node.inputs[1]],
                        stats,
                        &dout,
                    )?;
                    acc(&mut grads[node.inputs[0]], g.input);
                    acc(&mut grads[node.inputs[1]], g.gamma);
                    acc(&mut grads[node.inputs[2]], g.beta);
                }
                Op::BnEval {
                    running_mean,
                    running_var,
                    eps,
                } => {
                    let params = BnParams {
                        gamma: self.values[node.inputs[1]].clone(),
                        beta: self.values[node.inputs[2]].clone(),
                        running_mean: running_mean.clone(),
                        running_var: running_var.clone(),
                    };
                    let g = nn::batchnorm_eval_backward(
                        &self.values[node.inputs[0]],
                        &params,
                        *eps,
                        &dout,
                    )?;
                    acc(&mut grads[node.inputs[0]], g.input);
                    acc(&mut grads[node.inputs[1]], g.gamma);
                    acc(&mut grads[node.inputs[2]], g.beta);
                }
                Op::MaxPool {
                    argmax, in_shape, ..
                } => {
                    let g = nn::maxpool_backward(in_shape, argmax, &dout)?;
                    acc(&mut grads[node.inputs[0]], g);
                }
                Op::GlobalAvgPool { in_shape } => {
                    let g = nn::global_avg_pool_backward(in_shape, &dout)?;
                    acc(&mut grads[node.inputs[0]], g);
                }
                Op::Upsample { factor, in_shape } => {
                    let g = nn::upsample_nearest_backward(in_shape, *factor, &dout)?;
                    acc(&mut grads[node.inputs[0]], g);
                }
                Op::Flatten { in_shape } => {
                    let g = dout.reshaped(in_shape.clone())?;
                    acc(&mut grads[node.inputs[0]], g);
                }
                Op::SumAll { in_shape } => {
                    let up = dout.item()?;
                    acc(&mut grads[node.inputs[0]], Tensor::filled(in_shape.clone(), up));
                }
                Op::Scale { factor } => {
                    acc(&mut grads[node.inputs[0]], dout.scale(*factor));
                }
                Op::SoftmaxCrossEntropy { labels, probs } => {
                    let up = dout.item()?;
                    let g = nn::softmax_cross_entropy_backward(probs, labels, up)?;
                    acc(&mut grads[node.inputs[0]], g);
                }
                Op::ReconSum { scale } => {
                    let up = dout.item()?;
                    let y = &self.values[node.inputs[0]];
                    let x = &self.values[node.inputs[1]];
                    let factor = *scale * up;
                    let dy = y.zip_map(x, |yv, xv| (yv - xv) * factor)?;
                    let dx = dy.map(|v| -v);
                    acc(&mut grads[node.inputs[0]], dy);
                    acc(&mut grads[node.inputs[1]], dx);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }
}

/// Result of a backward sweep: gradients addressable by [`ValueId`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    /// dLoss/dValue; zeros if the value never influenced the loss.
    pub fn wrt(&self, id: ValueId) -> Tensor<E> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    pub fn contains(&self, id: ValueId) -> bool {
        self.grads[id.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sum_of_leaf_gives_all_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1.0; 6]).unwrap());
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_distance_gradient_is_residual() {
        // 0.5 * ||w - x||^2 with w=(1,2), x=(0,0) -> dw = (1,2)
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        let loss = tape.recon_sum(w, x, 1.0).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 2.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0, 2.0]);
        assert_eq!(grads.wrt(x).data(), &[-1.0, -2.0]);
    }

    #[test]
    fn off_path_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::ones(vec![3]));
        let unused = tape.leaf(Tensor::ones(vec![4]));
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.contains(unused));
        assert_eq!(grads.wrt(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::ones(vec![3]));
        let y = tape.relu(w);
        assert!(matches!(
            tape.backward(y),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::<f64>::new();
        let mut rng = crate::rng::stream(3, "tape", 0);
        let x = tape.leaf(
            Tensor::from_vec(vec![1, 1, 4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let k = tape.leaf(
            Tensor::from_vec(vec![2, 1, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let c = tape.conv2d(x, k, None, 1, 1).unwrap();
        let r = tape.relu(c);
        let loss = tape.sum_all(r);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.wrt(k).data(), g2.wrt(k).data());
        assert_eq!(g1.wrt(x).data(), g2.wrt(x).data());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let build = || {
            let mut tape = Tape::<f32>::new();
            let mut rng = crate::rng::stream(9, "det", 0);
            let x = tape.leaf(
                Tensor::from_vec(
                    vec![2, 3, 8, 8],
                    (0..2 * 3 * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                )
                .unwrap(),
            );
            let k = tape.leaf(
                Tensor::from_vec(
                    vec![4, 3, 3, 3],
                    (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                )
                .unwrap(),
            );
            let c = tape.conv2d(x, k, None, 2, 1).unwrap();
            let r = tape.relu(c);
            let s = tape.sum_all(r);
            tape.value(s).item().unwrap()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
