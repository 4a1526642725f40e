//! Dynamic reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a node recording its inputs.
//! Inputs always precede their consumers, so walking the arena backwards is a
//! valid reverse topological order and no explicit sort is needed.

use super::conv::{self, ConvDims, ConvGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Relu6,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    Atan,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        // batch statistics feed back into the gradient in training mode
        batch_stats: bool,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Upsample {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance used for normalisation.
    pub var: Vec<f64>,
    /// Unbiased variance, the estimator tracked by running statistics.
    pub var_unbiased: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Number of leaves with a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let dims = ConvDims::resolve(xv.shape(), wv.shape(), geom)?;
        let bias = match b {
            Some(b) => {
                let bv = &self.nodes[b.0].value;
                if bv.len() != dims.cout {
                    return Err(Error::config(format!(
                        "conv2d bias has {} entries, expected Cout = {}",
                        bv.len(),
                        dims.cout
                    )));
                }
                Some(bv.data())
            }
            None => None,
        };
        let mut out = vec![T::zero(); dims.n * dims.cout * dims.hout * dims.wout];
        conv::forward(&dims, xv.data(), wv.data(), bias, &mut out);
        let value = Tensor::new(vec![dims.n, dims.cout, dims.hout, dims.wout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv { x, w, b, dims }, rg))
    }

    fn check_bn_params(&self, x: Var, params: &[(&str, usize)]) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        for &(name, len) in params {
            if len != c {
                return Err(Error::config(format!(
                    "batchnorm {name} has {len} entries, expected C = {c}"
                )));
            }
        }
        Ok((n, c, h * w))
    }

    /// Training-mode batch normalisation with batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        if eps <= 0.0 {
            return Err(Error::config("batchnorm eps must be positive"));
        }
        let (n, c, hw) = self.check_bn_params(
            x,
            &[
                ("gamma", self.value(gamma).len()),
                ("beta", self.value(beta).len()),
            ],
        )?;
        let xv = self.nodes[x.0].value.data();
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xv[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .sum::<f64>();
            }
            let m = s / count;
            let mut ss = 0.0;
            for b in 0..n {
                ss += xv[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64().unwrap() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / count;
        }
        let var_unbiased = var
            .iter()
            .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
            .collect();
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean_t, &inv_std)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((
            v,
            BatchStats {
                mean,
                var,
                var_unbiased,
            },
        ))
    }

    /// Inference-mode batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("batchnorm eps must be positive"));
        }
        self.check_bn_params(
            x,
            &[
                ("gamma", self.value(gamma).len()),
                ("beta", self.value(beta).len()),
                ("running_mean", running_mean.len()),
                ("running_var", running_var.len()),
            ],
        )?;
        if let Some((i, v)) = running_var
            .iter()
            .enumerate()
            .find(|(_, v)| **v < T::zero() || v.is_nan())
        {
            return Err(Error::InvalidState(format!(
                "batchnorm running variance of channel {i} is {v}"
            )));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        Ok((Tensor::new(xv.shape().to_vec(), out)?, xhat))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Relu => |v| v.max(T::zero()),
            Unary::Relu6 => |v| v.max(T::zero()).min(T::of(6.0)),
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => |v| v.exp(),
            Unary::Ln => |v| v.ln(),
            Unary::Sqrt => |v| v.sqrt(),
            Unary::Atan => |v| v.atan(),
            Unary::Square => |v| v * v,
            Unary::Neg => |v| -v,
        };
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// `min(max(x, 0), 6)`.
    pub fn relu6(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu6)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Atan)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        same_shape(av, bv, &format!("{kind:?}"))?;
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Max => |x, y| if x >= y { x } else { y },
            Binary::Min => |x, y| if x <= y { x } else { y },
        };
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Max)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::MulScalar { x, c }, rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Concatenates two `(N, C, H, W)` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::config(format!(
                "concat_channels: spatial mismatch (N, H, W) = ({na}, {ha}, {wa}) vs ({nb}, {hb}, {wb})"
            )));
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            out.extend_from_slice(&self.value(a).data()[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Channels `start..start + len` of a 4-D tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return Err(Error::config(format!(
                "slice_channels: range {start}..{} exceeds {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&self.value(x).data()[(b * c + start) * hw..][..len * hw]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample { x }, rg))
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if padding >= kernel {
            return Err(Error::config(format!(
                "max_pool2d padding {padding} must be smaller than kernel {kernel}"
            )));
        }
        let geom = ConvGeometry::new(stride, padding, 1);
        let ho = geom.output_extent(h, kernel)?;
        let wo = geom.output_extent(w, kernel)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ki in 0..kernel {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let idx = base + ii as usize * w + jj as usize;
                            if at == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (p * ho + oi) * wo + oj;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::config(format!(
                "gather index {bad} out of bounds for {} elements",
                xv.len()
            )));
        }
        let data: Vec<T> = indices.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `sum_i w_i * BCE(sigmoid(z_i), t_i)` computed from logits.
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: Vec<T>, weights: Vec<T>) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.len() || weights.len() != z.len() {
            return Err(Error::config(format!(
                "bce: {} logits but {} targets and {} weights",
                z.len(),
                targets.len(),
                weights.len()
            )));
        }
        let s: T = z
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&z, &t), &w)| w * (softplus(z) - z * t))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Bce {
                logits,
                targets,
                weights,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss.
    ///
    /// The tape is left intact, so calling this twice yields identical
    /// gradients. Leaves that require gradients but do not influence the loss
    /// receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let input = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, dims } => {
                let mut gx = self.rg(*x).then(|| vec![T::zero(); input(*x).len()]);
                let mut gw = self.rg(*w).then(|| vec![T::zero(); input(*w).len()]);
                let mut gb = b
                    .filter(|b| self.rg(*b))
                    .map(|b| vec![T::zero(); input(b).len()]);
                conv::backward(
                    dims,
                    input(*x).data(),
                    input(*w).data(),
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(g) = gx {
                    accumulate(grads, *x, g);
                }
                if let Some(g) = gw {
                    accumulate(grads, *w, g);
                }
                if let (Some(g), Some(b)) = (gb, b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4().expect("bn is 4-D");
                let hw = h * w;
                let g = input(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); gy.len()];
                    let m = T::of((n * hw) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let scale = g[ch] * inv_std[ch];
                            for i in off..off + hw {
                                gx[i] = if *batch_stats {
                                    // d/dx of gamma * (x - mean) / std with batch mean/std
                                    scale / m * (m * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    scale * gy[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Unary { x, kind } => {
                let xv = input(*x).data();
                let yv = node.value.data();
                let six = T::of(6.0);
                let half = T::of(0.5);
                let gx: Vec<T> = (0..gy.len())
                    .map(|i| {
                        let (xi, yi) = (xv[i], yv[i]);
                        let d = match kind {
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Relu6 => {
                                if xi > T::zero() && xi < six {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Softplus => sigmoid(xi),
                            Unary::Exp => yi,
                            Unary::Ln => T::one() / xi,
                            Unary::Sqrt => half / yi,
                            Unary::Atan => T::one() / (T::one() + xi * xi),
                            Unary::Square => (T::one() + T::one()) * xi,
                            Unary::Neg => -T::one(),
                        };
                        d * gy[i]
                    })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Binary { a, b, kind } => {
                let av = input(*a).data();
                let bv = input(*b).data();
                let n = gy.len();
                let (mut ga, mut gb) = (vec![T::zero(); n], vec![T::zero(); n]);
                for i in 0..n {
                    let (x, y, g) = (av[i], bv[i], gy[i]);
                    let (da, db) = match kind {
                        Binary::Add => (g, g),
                        Binary::Sub => (g, -g),
                        Binary::Mul => (g * y, g * x),
                        Binary::Div => (g / y, -g * x / (y * y)),
                        Binary::Max => {
                            if x >= y {
                                (g, T::zero())
                            } else {
                                (T::zero(), g)
                            }
                        }
                        Binary::Min => {
                            if x <= y {
                                (g, T::zero())
                            } else {
                                (T::zero(), g)
                            }
                        }
                    };
                    ga[i] = da;
                    gb[i] = db;
                }
                if self.rg(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar { x } => accumulate(grads, *x, gy.to_vec()),
            Op::MulScalar { x, c } => accumulate(grads, *x, gy.iter().map(|&g| g * *c).collect()),
            Op::Sum { x } => accumulate(grads, *x, vec![gy[0]; input(*x).len()]),
            Op::Concat { a, b } => {
                let (n, ca, h, w) = input(*a).dims4().expect("4-D");
                let cb = input(*b).shape()[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for bi in 0..n {
                    let base = bi * (ca + cb) * hw;
                    ga.extend_from_slice(&gy[base..base + ca * hw]);
                    gb.extend_from_slice(&gy[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = input(*x).dims4().expect("4-D");
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut gx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    gx[(b * c + start) * hw..][..len * hw]
                        .copy_from_slice(&gy[b * len * hw..(b + 1) * len * hw]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Upsample { x } => {
                let (n, c, h, w) = input(*x).dims4().expect("4-D");
                let w2 = 2 * w;
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &gy[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..w2 {
                            dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); input(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += gy[o];
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather { x, indices } => {
                let mut gx = vec![T::zero(); input(*x).len()];
                for (o, &src) in indices.iter().enumerate() {
                    gx[src] += gy[o];
                }
                accumulate(grads, *x, gx);
            }
            Op::Bce {
                logits,
                targets,
                weights,
            } => {
                let z = input(*logits).data();
                let gx = z
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| gy[0] * w * (sigmoid(z) - t))
                    .collect();
                accumulate(grads, *logits, gx);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn independent_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[0.1, -0.5, 0.3, 2.0, 1.5, -1.0, 0.7, 0.2, -0.3]), true);
        let w = tape.leaf(t(&[1, 1, 2, 2], &[0.5, -0.25, 1.0, 0.3]), true);
        let y = tape.conv2d(x, w, None, ConvGeometry::new(1, 0, 1)).unwrap();
        let y2 = tape.square(y);
        let s = tape.sum(y2);
        let a = tape.backward(s).unwrap();
        let b = tape.backward(s).unwrap();
        assert_eq!(a.get(x).unwrap(), b.get(x).unwrap());
        assert_eq!(a.get(w).unwrap(), b.get(w).unwrap());
    }

    #[test]
    fn conv_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[5.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, None, ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let y = tape.conv2d(x, w, None, ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let x = tape.constant(t(&[1, 3, 4, 4], &(0..48).map(|i| i as f64).collect::<Vec<_>>()));
        let y = tape.conv2d(x, z, None, ConvGeometry::new(1, 1, 1)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[2.0, 4.0]));
        let one = tape.constant(t(&[1], &[1.0]));
        let zero = tape.constant(t(&[1], &[0.0]));
        // eps must be positive; 1e-300 is zero for all practical purposes here
        let y = tape.batch_norm_eval(x, one, zero, &[3.0], &[1.0], 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let y = tape.batch_norm_eval(x, one, zero, &[0.0], &[1.0], 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);

        let beta = tape.constant(t(&[1], &[0.75]));
        let (y, _) = tape.batch_norm_train(x, zero, beta, 1e-3).unwrap();
        assert_eq!(tape.value(y).data(), &[0.75, 0.75]);

        let err = tape.batch_norm_eval(x, one, zero, &[0.0], &[-1.0], 1e-3).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn batchnorm_train_reports_statistics() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 6.0]));
        let one = tape.constant(t(&[1], &[1.0]));
        let zero = tape.constant(t(&[1], &[0.0]));
        let (_, stats) = tape.batch_norm_train(x, one, zero, 1e-3).unwrap();
        assert_eq!(stats.mean, vec![3.0]);
        assert_eq!(stats.var, vec![3.5]);
        assert!((stats.var_unbiased[0] - 14.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relu6_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 3.0, 7.0]));
        let y = tape.relu6(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn upsample_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[1.0]), true);
        let y = tape.upsample_nearest_2x(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[4.0]);

        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.upsample_nearest_2x(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 4, 4]);
        // index-map oracle: out[i][j] = in[i / 2][j / 2]
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(v.at4(0, 0, i, j), [1., 2., 3., 4.][(i / 2) * 2 + j / 2]);
            }
        }
    }

    #[test]
    fn concat_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(t(&[1, 2, 4, 4], &(0..32).map(|i| i as f64).collect::<Vec<_>>()));
        let b = tape.constant(t(&[1, 3, 4, 4], &(0..48).map(|i| -(i as f64)).collect::<Vec<_>>()));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 4, 4]);
        let back_a = tape.slice_channels(c, 0, 2).unwrap();
        let back_b = tape.slice_channels(c, 2, 3).unwrap();
        assert_eq!(tape.value(back_a), tape.value(a));
        assert_eq!(tape.value(back_b), tape.value(b));

        let empty = tape.constant(Tensor::zeros(&[1, 0, 4, 4]));
        let same = tape.concat_channels(a, empty).unwrap();
        assert_eq!(tape.value(same), tape.value(a));

        let bad = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.concat_channels(a, bad).is_err());
    }
}
