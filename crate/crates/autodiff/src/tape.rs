use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, BatchStats, ConvTransposeSpec};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvTransposeSpec,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Softplus(Var),
    Select(Var, usize),
    SmoothL1 {
        pred: Var,
        target: Var,
        beta: T,
    },
    Focal {
        pred: Var,
        target: Var,
        gamma: T,
        alpha: T,
        clamp: T,
    },
    Dice {
        pred: Var,
        target: Var,
        smooth: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation in topological order for reverse-mode
/// differentiation. One tape per training step; it is not shared across threads.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("operands have shapes {a:?} and {b:?}")));
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Per-sample spans `(start, len)` for reductions that treat the leading dim as the batch.
fn sample_spans(shape: &[usize], len: usize) -> (usize, usize) {
    if shape.len() >= 2 {
        (shape[0], len / shape[0])
    } else {
        (1, len)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (targets, fixed inputs).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvTransposeSpec) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), self.value(b), &spec)?;
        Ok(self.push(out, Op::ConvTranspose { x, w, b, spec }, &[x, w, b]))
    }

    pub fn conv2d_1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv2d_1x1(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Conv1x1 { x, w, b }, &[x, w, b]))
    }

    /// Batch normalization over `(batch, height, width)` per channel.
    ///
    /// In train mode the batch statistics are returned so the caller can fold
    /// them into its running estimates.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (_, c, _, _) = self.value(x).dims4("batch_norm2d")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(shape_err(
                    "batch_norm2d",
                    format!("{name} shape {:?} does not match {c} channels", self.value(p).shape()),
                ));
            }
        }
        let (mean, var, stats, train) = match mode {
            NormMode::Train => {
                let stats = kernels::channel_stats(self.value(x))?;
                (stats.mean.clone(), stats.var.clone(), Some(stats), true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm2d", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = kernels::channel_affine(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn nearest_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::nearest_upsample(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Upsample(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// `ln(1 + eˣ)`, elementwise.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    /// Element `index` of the flattened tensor, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(shape_err(
                "select",
                format!("index {index} out of range for shape {:?}", t.shape()),
            ));
        }
        let out = Tensor::scalar(t.data()[index]);
        Ok(self.push(out, Op::Select(x, index), &[x]))
    }

    /// Mean over elements of `0.5·d²/beta` if `|d| < beta`, else `|d| − 0.5·beta`, with `d = pred − target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: T) -> Result<Var> {
        same_shape("smooth_l1", self.value(pred).shape(), self.value(target).shape())?;
        let half = T::of(0.5);
        let p = self.value(pred).data();
        let y = self.value(target).data();
        let total: T = p
            .iter()
            .zip(y)
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum();
        let out = Tensor::scalar(total / T::of(p.len() as f64));
        Ok(self.push(out, Op::SmoothL1 { pred, target, beta }, &[pred]))
    }

    /// Mean binary focal loss with soft targets:
    /// `−[α·y·(1−p)^γ·ln p + (1−α)·(1−y)·p^γ·ln(1−p)]`. The arguments of both
    /// logarithms are clamped below at `clamp`, so a perfect binary prediction
    /// scores exactly zero.
    pub fn focal(&mut self, pred: Var, target: Var, gamma: T, alpha: T, clamp: T) -> Result<Var> {
        same_shape("focal", self.value(pred).shape(), self.value(target).shape())?;
        let one = T::one();
        let p = self.value(pred).data();
        let y = self.value(target).data();
        let total: T = p
            .iter()
            .zip(y)
            .map(|(&a, &t)| {
                let q = a.max(T::zero()).min(one);
                let (ln_q, ln_r) = (a.max(clamp).ln(), (one - a).max(clamp).ln());
                -(alpha * t * (one - q).powf(gamma) * ln_q + (one - alpha) * (one - t) * q.powf(gamma) * ln_r)
            })
            .sum();
        let out = Tensor::scalar(total / T::of(p.len() as f64));
        Ok(self.push(
            out,
            Op::Focal {
                pred,
                target,
                gamma,
                alpha,
                clamp,
            },
            &[pred],
        ))
    }

    /// Soft Dice loss `1 − (2·Σŷy + s)/(Σŷ² + Σy² + s)` per sample (leading dim), averaged.
    pub fn dice(&mut self, pred: Var, target: Var, smooth: T) -> Result<Var> {
        same_shape("dice", self.value(pred).shape(), self.value(target).shape())?;
        let (n, span) = sample_spans(self.value(pred).shape(), self.value(pred).len());
        let p = self.value(pred).data();
        let y = self.value(target).data();
        let mut total = T::zero();
        for s in 0..n {
            let (ps, ys) = (&p[s * span..(s + 1) * span], &y[s * span..(s + 1) * span]);
            let inter: T = ps.iter().zip(ys).map(|(&a, &b)| a * b).sum();
            let denom: T = ps.iter().map(|&a| a * a).sum::<T>() + ys.iter().map(|&b| b * b).sum::<T>();
            total += T::one() - (T::of(2.0) * inter + smooth) / (denom + smooth);
        }
        let out = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(out, Op::Dice { pred, target, smooth }, &[pred]))
    }

    /// Hash of every piecewise-branch decision on the tape (ReLU signs and
    /// focal-loss clamping). Finite differences are only meaningful when a
    /// perturbation leaves this unchanged.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => {
                    for &v in self.value(x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Focal { pred, clamp, .. } => {
                    for &v in self.value(pred).data() {
                        (v < clamp || v > T::one() - clamp).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            grads[idx] = Some(g);
            for (v, d) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let one = T::one();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::ConvTranspose { x, w, b, spec } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), spec, g)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Conv1x1 { x, w, b } => {
                let (dx, dw, db) = kernels::conv2d_1x1_backward(self.value(*x), self.value(*w), g)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4("batch_norm2d")?;
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let m = T::of((n * hw) as f64);
                for ch in 0..c {
                    let planes = (0..n).map(|b| (b * c + ch) * hw);
                    let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                    for base in planes.clone() {
                        for k in base..base + hw {
                            let xh = (xv.data()[k] - mean[ch]) * inv_std[ch];
                            sum_g += g.data()[k];
                            sum_gx += g.data()[k] * xh;
                        }
                    }
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gx;
                    let scale = gam[ch] * inv_std[ch];
                    for base in planes {
                        for (k, d) in dx.iter_mut().enumerate().skip(base).take(hw) {
                            *d = if *train {
                                let xh = (xv.data()[k] - mean[ch]) * inv_std[ch];
                                scale * (g.data()[k] - sum_g / m - xh * sum_gx / m)
                            } else {
                                scale * g.data()[k]
                            };
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_vec(xv.shape(), dx)?),
                    (*gamma, Tensor::from_vec(&[c], dgamma)?),
                    (*beta, Tensor::from_vec(&[c], dbeta)?),
                ]
            }
            Op::Relu(x) => {
                let data = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), data)?)]
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &d)| d * s * (one - s))
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), data)?)]
            }
            Op::Upsample(x) => {
                vec![(*x, kernels::nearest_upsample_backward(self.value(*x).shape(), g)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&d, &v)| d * v)
                    .collect();
                let gb = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&d, &v)| d * v)
                    .collect();
                vec![
                    (*a, Tensor::from_vec(g.shape(), ga)?),
                    (*b, Tensor::from_vec(g.shape(), gb)?),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|d| d * *c))],
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), g.item()))],
            Op::Softplus(x) => {
                let data = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| d * sigmoid(v))
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), data)?)]
            }
            Op::Select(x, i) => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                d.data_mut()[*i] = g.item();
                vec![(*x, d)]
            }
            Op::SmoothL1 { pred, target, beta } => {
                let p = self.value(*pred);
                let scale = g.item() / T::of(p.len() as f64);
                let data = p
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d.abs() < *beta {
                            scale * d / *beta
                        } else {
                            scale * d.signum()
                        }
                    })
                    .collect();
                vec![(*pred, Tensor::from_vec(p.shape(), data)?)]
            }
            Op::Focal {
                pred,
                target,
                gamma,
                alpha,
                clamp,
            } => {
                let p = self.value(*pred);
                let scale = g.item() / T::of(p.len() as f64);
                let (gm, al, cl) = (*gamma, *alpha, *clamp);
                let data = p
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .map(|(&a, &t)| {
                        let q = a.max(T::zero()).min(one);
                        let r = one - q;
                        // The clamp only guards the logarithms.
                        let (ln_q, ln_r) = (a.max(cl).ln(), (one - a).max(cl).ln());
                        let dln_q = if a > cl { one / a } else { T::zero() };
                        let dln_r = if one - a > cl { -one / (one - a) } else { T::zero() };
                        let (dpow_r, dpow_q) = if gm == T::zero() {
                            (T::zero(), T::zero())
                        } else {
                            (-gm * r.powf(gm - one), gm * q.powf(gm - one))
                        };
                        let pos = dpow_r * ln_q + r.powf(gm) * dln_q;
                        let neg = dpow_q * ln_r + q.powf(gm) * dln_r;
                        -scale * (al * t * pos + (one - al) * (one - t) * neg)
                    })
                    .collect();
                vec![(*pred, Tensor::from_vec(p.shape(), data)?)]
            }
            Op::Dice { pred, target, smooth } => {
                let pv = self.value(*pred);
                let (n, span) = sample_spans(pv.shape(), pv.len());
                let p = pv.data();
                let y = self.value(*target).data();
                let two = T::of(2.0);
                let scale = g.item() / T::of(n as f64);
                let mut d = vec![T::zero(); p.len()];
                for s in 0..n {
                    let r = s * span..(s + 1) * span;
                    let inter: T = p[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
                    let denom: T = p[r.clone()].iter().map(|&a| a * a).sum::<T>()
                        + y[r.clone()].iter().map(|&b| b * b).sum::<T>()
                        + *smooth;
                    let numer = two * inter + *smooth;
                    for k in r {
                        d[k] = -scale * (two * y[k] * denom - numer * two * p[k]) / (denom * denom);
                    }
                }
                vec![(*pred, Tensor::from_vec(pv.shape(), d)?)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let mut tape = Tape::<f64>::new();
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(Tensor::from_vec(&[4], vals.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), vals.as_slice());
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        let unused = tape.leaf(Tensor::full(&[2, 2], 1.0));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![0.0, -1.5, 2.0]).unwrap());
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        let r = tape.relu(x);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_norm_train_rejects_singleton_statistics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        let gm = tape.leaf(Tensor::full(&[2], 1.0));
        let bt = tape.leaf(Tensor::zeros(&[2]));
        let r = tape.batch_norm2d(x, gm, bt, NormMode::Train, 1e-5);
        assert!(matches!(r, Err(Error::DegenerateBatch { count: 1 })));
    }
}
