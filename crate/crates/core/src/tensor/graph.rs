use std::cell::{Ref, RefCell};

use super::conv::{col2im, im2col, ConvGeom};
use super::{matmul, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    LeakyRelu(Var, F),
    Tanh(Var),
    LogSigmoid(Var),
    Abs(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<F>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<F>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Mean(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    L2Normalize {
        x: Var,
        eps: F,
    },
    Gather {
        x: Var,
        sample: usize,
        positions: Vec<usize>,
    },
    Contrastive {
        q: Var,
        pos: Var,
        bank: Var,
        inv_tau: F,
        /// Softmax over `[positive, bank...]` per query row, flattened `m × (1 + j)`.
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Append-only tape. Operations record their output and what is needed to
/// propagate gradients; [`Graph::backward`] walks it in reverse.
pub struct Graph<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    grads: RefCell<Vec<Option<Tensor<F>>>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn slot<'a, F: Float>(nodes: &[Node<F>], grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut [F]> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let numel = n.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); numel]).as_mut_slice())
}

fn stable_log_sigmoid<F: Float>(x: F) -> F {
    // log σ(x) = min(x, 0) - log1p(exp(-|x|))
    x.min(F::zero()) - (-x.abs()).exp().ln_1p()
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unary(&self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.needs(&[a]);
        self.push(out, op, ng)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(va.shape(), data).expect("same shape")
        };
        let ng = self.needs(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: F) -> Var {
        self.unary(
            a,
            |x| if x > F::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn log_sigmoid(&self, a: Var) -> Var {
        self.unary(a, stable_log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        let ng = self.needs(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = {
            let v = self.value(a);
            let s: F = v.data().iter().copied().sum();
            Tensor::scalar(s / F::cst(v.numel() as f64))
        };
        let ng = self.needs(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().copied().sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    /// 2D convolution. `x` is `[n, c, h, w]`, `w` is `[o, c, kh, kw]`, `b` is `[o]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, c, h, wd) = xv.dims4().expect("conv2d input");
            let (o, wc, kh, kw) = wv.dims4().expect("conv2d weight");
            assert_eq!(c, wc, "conv2d channel mismatch");
            assert_eq!((kh, kw), (geom.kh, geom.kw), "conv2d kernel mismatch");
            let (ho, wo) = geom.conv_out(h, wd).expect("conv2d: kernel larger than input");
            let kdim = c * kh * kw;
            let plane = ho * wo;
            let mut cols = vec![F::zero(); kdim * plane];
            let mut out = Tensor::zeros(&[n, o, ho, wo]);
            let bias = b.map(|b| self.value(b).data().to_vec());
            for i in 0..n {
                im2col(&xv.data()[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, &geom, ho, wo, &mut cols);
                let dst = &mut out.data_mut()[i * o * plane..(i + 1) * o * plane];
                if let Some(bias) = &bias {
                    for (oc, row) in dst.chunks_mut(plane).enumerate() {
                        row.iter_mut().for_each(|v| *v = bias[oc]);
                    }
                    matmul(o, kdim, plane, wv.data(), false, &cols, false, F::one(), dst);
                } else {
                    matmul(o, kdim, plane, wv.data(), false, &cols, false, F::zero(), dst);
                }
            }
            out
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(out, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Transposed convolution producing exactly `out_hw`. `w` is `[c_in, c_out, kh, kw]`.
    /// `out_hw` must be reachable with an output padding smaller than the stride.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_hw: (usize, usize),
    ) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, c, h, wd) = xv.dims4().expect("conv_t input");
            let (wc, o, kh, kw) = wv.dims4().expect("conv_t weight");
            assert_eq!(c, wc, "conv_t channel mismatch");
            assert_eq!((kh, kw), (geom.kh, geom.kw), "conv_t kernel mismatch");
            let (ho, wo) = out_hw;
            assert_eq!(
                geom.conv_out(ho, wo),
                Some((h, wd)),
                "conv_t: requested output {out_hw:?} is not reachable from {h}x{wd}"
            );
            let kdim = o * kh * kw;
            let plane = h * wd;
            let mut cols = vec![F::zero(); kdim * plane];
            let mut out = Tensor::zeros(&[n, o, ho, wo]);
            let bias = b.map(|b| self.value(b).data().to_vec());
            for i in 0..n {
                matmul(kdim, c, plane, wv.data(), true, &xv.data()[i * c * plane..(i + 1) * c * plane], false, F::zero(), &mut cols);
                let dst = &mut out.data_mut()[i * o * ho * wo..(i + 1) * o * ho * wo];
                col2im(&cols, o, ho, wo, &geom, h, wd, dst);
                if let Some(bias) = &bias {
                    for (oc, row) in dst.chunks_mut(ho * wo).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[oc]);
                    }
                }
            }
            out
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(out, Op::ConvT2d { x, w, b, geom }, ng)
    }

    /// `x @ wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, din) = xv.dims2().expect("linear input");
            let (dout, win) = wv.dims2().expect("linear weight");
            assert_eq!(din, win, "linear: input width mismatch");
            let mut out = Tensor::zeros(&[n, dout]);
            if let Some(b) = b {
                let bv = self.value(b);
                for row in out.data_mut().chunks_mut(dout) {
                    row.copy_from_slice(bv.data());
                }
            }
            matmul(n, din, dout, xv.data(), false, wv.data(), true, F::one(), out.data_mut());
            out
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Per-sample, per-channel `x * gamma + beta`; `gamma`, `beta` are `[n, c]`.
    pub fn film(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4().expect("film input");
            let gv = self.value(gamma);
            let bv = self.value(beta);
            assert_eq!(gv.shape(), &[n, c], "film gamma shape");
            assert_eq!(bv.shape(), &[n, c], "film beta shape");
            let mut out = xv.clone();
            for (k, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
                let (g, b) = (gv.data()[k], bv.data()[k]);
                plane.iter_mut().for_each(|v| *v = *v * g + b);
            }
            out
        };
        let ng = self.needs(&[x, gamma, beta]);
        self.push(out, Op::Film { x, gamma, beta }, ng)
    }

    /// Fixed per-channel affine map (used for inference-mode batch norm).
    pub fn channel_affine(&self, x: Var, scale: Vec<F>, shift: Vec<F>) -> Var {
        let out = {
            let xv = self.value(x);
            let (_, c, h, w) = xv.dims4().expect("channel_affine input");
            assert_eq!(scale.len(), c);
            assert_eq!(shift.len(), c);
            let mut out = xv.clone();
            for (k, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
                let (s, t) = (scale[k % c], shift[k % c]);
                plane.iter_mut().for_each(|v| *v = *v * s + t);
            }
            out
        };
        let ng = self.needs(&[x]);
        self.push(out, Op::ChannelAffine { x, scale }, ng)
    }

    /// Normalize each `(sample, channel)` plane to zero mean and unit variance.
    pub fn instance_norm(&self, x: Var, eps: F) -> Var {
        let (out, inv_std) = {
            let xv = self.value(x);
            let (_, _, h, w) = xv.dims4().expect("instance_norm input");
            let hw = F::cst((h * w) as f64);
            let mut out = xv.clone();
            let mut inv_std = Vec::new();
            for plane in out.data_mut().chunks_mut(h * w) {
                let mean = plane.iter().copied().sum::<F>() / hw;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / hw;
                let is = F::one() / (var + eps).sqrt();
                plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
                inv_std.push(is);
            }
            (out, inv_std)
        };
        let ng = self.needs(&[x]);
        self.push(out, Op::InstanceNorm { x, inv_std }, ng)
    }

    /// Training-mode batch norm over `(n, h, w)` per channel. Returns the
    /// output and the batch mean and (biased) variance per channel.
    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, eps: F) -> (Var, Vec<F>, Vec<F>) {
        let (out, xhat, inv_std, means, vars) = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4().expect("batch_norm input");
            let gv = self.value(gamma);
            let bv = self.value(beta);
            let hw = h * w;
            let cnt = F::cst((n * hw) as f64);
            let mut means = vec![F::zero(); c];
            let mut vars = vec![F::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let p = &xv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    means[ch] += p.iter().copied().sum::<F>();
                }
            }
            means.iter_mut().for_each(|m| *m = *m / cnt);
            for i in 0..n {
                for ch in 0..c {
                    let p = &xv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    vars[ch] += p.iter().map(|&v| (v - means[ch]) * (v - means[ch])).sum::<F>();
                }
            }
            vars.iter_mut().for_each(|v| *v = *v / cnt);
            let inv_std: Vec<F> = vars.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let mut xhat = xv.data().to_vec();
            let mut out = xv.clone();
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    for (xh, o) in xhat[r.clone()].iter_mut().zip(&mut out.data_mut()[r]) {
                        *xh = (*xh - means[ch]) * inv_std[ch];
                        *o = *xh * gv.data()[ch] + bv.data()[ch];
                    }
                }
            }
            (out, xhat, inv_std, means, vars)
        };
        let ng = self.needs(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        (v, means, vars)
    }

    /// Multiply by a precomputed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&self, x: Var, mask: Vec<F>) -> Var {
        let out = {
            let xv = self.value(x);
            assert_eq!(mask.len(), xv.numel());
            let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Tensor::from_vec(xv.shape(), data).expect("same shape")
        };
        let ng = self.needs(&[x]);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4().expect("gap input");
            let hw = F::cst((h * w) as f64);
            let data = xv
                .data()
                .chunks(h * w)
                .map(|p| p.iter().copied().sum::<F>() / hw)
                .collect();
            Tensor::from_vec(&[n, c], data).expect("gap shape")
        };
        let ng = self.needs(&[x]);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    /// Concatenate `[n, d_i]` matrices along the feature axis.
    pub fn concat(&self, xs: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
            let n = vals[0].dims2().expect("concat input").0;
            let widths: Vec<usize> = vals
                .iter()
                .map(|v| {
                    let (r, c) = v.dims2().expect("concat input");
                    assert_eq!(r, n, "concat row mismatch");
                    c
                })
                .collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(n * total);
            for i in 0..n {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::from_vec(&[n, total], data).expect("concat shape")
        };
        let ng = self.needs(xs);
        self.push(out, Op::Concat(xs.to_vec()), ng)
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let (loss, probs) = {
            let lv = self.value(logits);
            let (n, k) = lv.dims2().expect("cross_entropy logits");
            assert_eq!(labels.len(), n, "one label per row");
            let mut probs = vec![F::zero(); n * k];
            let mut total = F::zero();
            for (i, row) in lv.data().chunks(k).enumerate() {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
                let lse = mx + z.ln();
                for (j, &v) in row.iter().enumerate() {
                    probs[i * k + j] = (v - lse).exp();
                }
                assert!(labels[i] < k, "label out of range");
                total += lse - row[labels[i]];
            }
            (Tensor::scalar(total / F::cst(n as f64)), probs)
        };
        let ng = self.needs(&[logits]);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Row-wise `x / sqrt(|x|² + eps)` on a `[n, d]` matrix.
    pub fn l2_normalize(&self, x: Var, eps: F) -> Var {
        let out = {
            let xv = self.value(x);
            let (_, d) = xv.dims2().expect("l2_normalize input");
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(d) {
                let n = (row.iter().map(|&v| v * v).sum::<F>() + eps).sqrt();
                row.iter_mut().for_each(|v| *v = *v / n);
            }
            out
        };
        let ng = self.needs(&[x]);
        self.push(out, Op::L2Normalize { x, eps }, ng)
    }

    /// Feature vectors of batch element `sample` at flattened spatial
    /// `positions`: `[n, c, h, w] -> [positions.len(), c]`.
    pub fn gather(&self, x: Var, sample: usize, positions: &[usize]) -> Var {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4().expect("gather input");
            assert!(sample < n, "gather: sample out of range");
            let hw = h * w;
            let base = sample * c * hw;
            let mut data = Vec::with_capacity(positions.len() * c);
            for &p in positions {
                assert!(p < hw, "gather: position out of range");
                for ch in 0..c {
                    data.push(xv.data()[base + ch * hw + p]);
                }
            }
            Tensor::from_vec(&[positions.len(), c], data).expect("gather shape")
        };
        let ng = self.needs(&[x]);
        self.push(
            out,
            Op::Gather {
                x,
                sample,
                positions: positions.to_vec(),
            },
            ng,
        )
    }

    /// InfoNCE over rows. For query `i` the logits are `q_i·pos_i / tau`
    /// followed by `q_i·bank_j / tau` for every bank row `j` (skipping `j == i`
    /// when `exclude_diag`); the result is the mean cross-entropy with the
    /// positive as the target class.
    pub fn contrastive(&self, q: Var, pos: Var, bank: Var, exclude_diag: bool, tau: F) -> Var {
        let inv_tau = F::one() / tau;
        let (loss, probs) = {
            let qv = self.value(q);
            let pv = self.value(pos);
            let bv = self.value(bank);
            let (m, d) = qv.dims2().expect("contrastive queries");
            assert_eq!(pv.shape(), &[m, d], "contrastive positives shape");
            let (j, bd) = bv.dims2().expect("contrastive bank");
            assert_eq!(bd, d, "contrastive bank width");
            if exclude_diag {
                assert_eq!(j, m, "diagonal exclusion needs a square bank");
            }
            let mut sims = vec![F::zero(); m * j];
            matmul(m, d, j, qv.data(), false, bv.data(), true, F::zero(), &mut sims);
            let width = 1 + j;
            let mut probs = vec![F::zero(); m * width];
            let mut total = F::zero();
            for i in 0..m {
                let qi = &qv.data()[i * d..(i + 1) * d];
                let pi = &pv.data()[i * d..(i + 1) * d];
                let l0 = qi.iter().zip(pi).map(|(&a, &b)| a * b).sum::<F>() * inv_tau;
                let row = &mut probs[i * width..(i + 1) * width];
                row[0] = l0;
                let mut mx = l0;
                for jj in 0..j {
                    if exclude_diag && jj == i {
                        row[1 + jj] = F::neg_infinity();
                    } else {
                        let l = sims[i * j + jj] * inv_tau;
                        row[1 + jj] = l;
                        mx = mx.max(l);
                    }
                }
                let z: F = row.iter().map(|&l| (l - mx).exp()).sum();
                let lse = mx + z.ln();
                total += lse - l0;
                row.iter_mut().for_each(|l| *l = (*l - lse).exp());
            }
            (Tensor::scalar(total / F::cst(m as f64)), probs)
        };
        let ng = self.needs(&[q, pos, bank]);
        self.push(
            loss,
            Op::Contrastive {
                q,
                pos,
                bank,
                inv_tau,
                probs,
            },
            ng,
        )
    }

    /// Reverse-mode sweep from a scalar. Gradients of leaves are kept and
    /// available through [`Graph::grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut kept: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    kept[idx] = Some(Tensor::from_vec(node.value.shape(), gy).expect("leaf grad"));
                }
                Op::Add(a, b) => {
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *b) {
                        g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *b) {
                        g.iter_mut().zip(&gy).for_each(|(g, &d)| *g -= d);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        for ((g, &d), &y) in g.iter_mut().zip(&gy).zip(vb) {
                            *g += d * y;
                        }
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *b) {
                        for ((g, &d), &x) in g.iter_mut().zip(&gy).zip(va) {
                            *g += d * x;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d * *s);
                    }
                }
                Op::Relu(a) => {
                    let out = node.value.data();
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        for ((g, &d), &y) in g.iter_mut().zip(&gy).zip(out) {
                            if y > F::zero() {
                                *g += d;
                            }
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = nodes[a.0].value.data();
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        for ((g, &d), &xv) in g.iter_mut().zip(&gy).zip(x) {
                            *g += if xv > F::zero() { d } else { d * *slope };
                        }
                    }
                }
                Op::Tanh(a) => {
                    let out = node.value.data();
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        for ((g, &d), &y) in g.iter_mut().zip(&gy).zip(out) {
                            *g += d * (F::one() - y * y);
                        }
                    }
                }
                Op::LogSigmoid(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        // d/dx log σ(x) = σ(-x)
                        for ((g, &d), &xv) in g.iter_mut().zip(&gy).zip(x) {
                            *g += d * stable_log_sigmoid(-xv).exp();
                        }
                    }
                }
                Op::Abs(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        for ((g, &d), &xv) in g.iter_mut().zip(&gy).zip(x) {
                            *g += d * xv.signum() * if xv == F::zero() { F::zero() } else { F::one() };
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (n, c, h, wd) = xv.dims4()?;
                    let (o, _, kh, kw) = wv.dims4()?;
                    let (_, _, ho, wo) = node.value.dims4()?;
                    let kdim = c * kh * kw;
                    let plane = ho * wo;
                    if let Some(b) = b {
                        if let Some(g) = slot(&nodes, &mut grads, *b) {
                            for i in 0..n {
                                for oc in 0..o {
                                    let s = (i * o + oc) * plane;
                                    g[oc] += gy[s..s + plane].iter().copied().sum::<F>();
                                }
                            }
                        }
                    }
                    let mut cols = vec![F::zero(); kdim * plane];
                    if nodes[w.0].needs_grad {
                        let mut gw = vec![F::zero(); o * kdim];
                        for i in 0..n {
                            im2col(&xv.data()[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, geom, ho, wo, &mut cols);
                            matmul(o, plane, kdim, &gy[i * o * plane..(i + 1) * o * plane], false, &cols, true, F::one(), &mut gw);
                        }
                        if let Some(g) = slot(&nodes, &mut grads, *w) {
                            g.iter_mut().zip(&gw).for_each(|(g, &d)| *g += d);
                        }
                    }
                    if let Some(gx) = slot(&nodes, &mut grads, *x) {
                        for i in 0..n {
                            matmul(kdim, o, plane, wv.data(), true, &gy[i * o * plane..(i + 1) * o * plane], false, F::zero(), &mut cols);
                            col2im(&cols, c, h, wd, geom, ho, wo, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                        }
                    }
                }
                Op::ConvT2d { x, w, b, geom } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (n, c, h, wd) = xv.dims4()?;
                    let (_, o, kh, kw) = wv.dims4()?;
                    let (_, _, ho, wo) = node.value.dims4()?;
                    let kdim = o * kh * kw;
                    let plane = h * wd;
                    let oplane = ho * wo;
                    if let Some(b) = b {
                        if let Some(g) = slot(&nodes, &mut grads, *b) {
                            for i in 0..n {
                                for oc in 0..o {
                                    let s = (i * o + oc) * oplane;
                                    g[oc] += gy[s..s + oplane].iter().copied().sum::<F>();
                                }
                            }
                        }
                    }
                    let mut cols = vec![F::zero(); kdim * plane];
                    let need_w = nodes[w.0].needs_grad;
                    let need_x = nodes[x.0].needs_grad;
                    let mut gw = vec![F::zero(); if need_w { c * kdim } else { 0 }];
                    let mut gx_local = vec![F::zero(); if need_x { n * c * plane } else { 0 }];
                    for i in 0..n {
                        im2col(&gy[i * o * oplane..(i + 1) * o * oplane], o, ho, wo, geom, h, wd, &mut cols);
                        if need_w {
                            matmul(c, plane, kdim, &xv.data()[i * c * plane..(i + 1) * c * plane], false, &cols, true, F::one(), &mut gw);
                        }
                        if need_x {
                            matmul(c, kdim, plane, wv.data(), false, &cols, false, F::zero(), &mut gx_local[i * c * plane..(i + 1) * c * plane]);
                        }
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *w) {
                        g.iter_mut().zip(&gw).for_each(|(g, &d)| *g += d);
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        g.iter_mut().zip(&gx_local).for_each(|(g, &d)| *g += d);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (n, din) = xv.dims2()?;
                    let (dout, _) = wv.dims2()?;
                    if let Some(b) = b {
                        if let Some(g) = slot(&nodes, &mut grads, *b) {
                            for row in gy.chunks(dout) {
                                g.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                            }
                        }
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *w) {
                        matmul(dout, n, din, &gy, true, xv.data(), false, F::one(), g);
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        matmul(n, dout, din, &gy, false, wv.data(), false, F::one(), g);
                    }
                }
                Op::Film { x, gamma, beta } => {
                    let xv = &nodes[x.0].value;
                    let gv = &nodes[gamma.0].value;
                    let (_, _, h, w) = xv.dims4()?;
                    let hw = h * w;
                    if let Some(g) = slot(&nodes, &mut grads, *beta) {
                        for (k, p) in gy.chunks(hw).enumerate() {
                            g[k] += p.iter().copied().sum::<F>();
                        }
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *gamma) {
                        for (k, (p, xp)) in gy.chunks(hw).zip(xv.data().chunks(hw)).enumerate() {
                            g[k] += p.iter().zip(xp).map(|(&d, &v)| d * v).sum::<F>();
                        }
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        for (k, (gp, p)) in g.chunks_mut(hw).zip(gy.chunks(hw)).enumerate() {
                            let s = gv.data()[k];
                            gp.iter_mut().zip(p).for_each(|(g, &d)| *g += d * s);
                        }
                    }
                }
                Op::ChannelAffine { x, scale } => {
                    let (_, c, h, w) = nodes[x.0].value.dims4()?;
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        for (k, (gp, p)) in g.chunks_mut(h * w).zip(gy.chunks(h * w)).enumerate() {
                            let s = scale[k % c];
                            gp.iter_mut().zip(p).for_each(|(g, &d)| *g += d * s);
                        }
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    let (_, _, h, w) = node.value.dims4()?;
                    let hw = h * w;
                    let nf = F::cst(hw as f64);
                    let xhat = node.value.data();
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        for (k, gp) in g.chunks_mut(hw).enumerate() {
                            let dy = &gy[k * hw..(k + 1) * hw];
                            let xh = &xhat[k * hw..(k + 1) * hw];
                            let mdy = dy.iter().copied().sum::<F>() / nf;
                            let mdyx = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / nf;
                            for ((g, &d), &xv) in gp.iter_mut().zip(dy).zip(xh) {
                                *g += inv_std[k] * (d - mdy - xv * mdyx);
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, h, w) = node.value.dims4()?;
                    let hw = h * w;
                    let cnt = F::cst((n * hw) as f64);
                    let mut sum_dy = vec![F::zero(); c];
                    let mut sum_dyx = vec![F::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                            sum_dy[ch] += gy[r.clone()].iter().copied().sum::<F>();
                            sum_dyx[ch] += gy[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<F>();
                        }
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *beta) {
                        g.iter_mut().zip(&sum_dy).for_each(|(g, &d)| *g += d);
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *gamma) {
                        g.iter_mut().zip(&sum_dyx).for_each(|(g, &d)| *g += d);
                    }
                    let gamma_v = nodes[gamma.0].value.data().to_vec();
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        for i in 0..n {
                            for ch in 0..c {
                                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                                let k = gamma_v[ch] * inv_std[ch];
                                let mdy = sum_dy[ch] / cnt;
                                let mdyx = sum_dyx[ch] / cnt;
                                for ((g, &d), &xh) in g[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&xhat[r]) {
                                    *g += k * (d - mdy - xh * mdyx);
                                }
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        for ((g, &d), &m) in g.iter_mut().zip(&gy).zip(mask) {
                            *g += d * m;
                        }
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let (_, _, h, w) = nodes[x.0].value.dims4()?;
                    let hw = F::cst((h * w) as f64);
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        for (gp, &d) in g.chunks_mut(h * w).zip(&gy) {
                            gp.iter_mut().for_each(|g| *g += d / hw);
                        }
                    }
                }
                Op::Concat(xs) => {
                    let (n, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &v in xs {
                        let w = nodes[v.0].value.dims2()?.1;
                        if let Some(g) = slot(&nodes, &mut grads, v) {
                            for i in 0..n {
                                let src = &gy[i * total + offset..i * total + offset + w];
                                g[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Mean(a) => {
                    let n = F::cst(nodes[a.0].value.numel() as f64);
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        g.iter_mut().for_each(|g| *g += gy[0] / n);
                    }
                }
                Op::Sum(a) => {
                    if let Some(g) = slot(&nodes, &mut grads, *a) {
                        g.iter_mut().for_each(|g| *g += gy[0]);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let (n, k) = nodes[logits.0].value.dims2()?;
                    let scale = gy[0] / F::cst(n as f64);
                    if let Some(g) = slot(&nodes, &mut grads, *logits) {
                        for i in 0..n {
                            for j in 0..k {
                                let t = if labels[i] == j { F::one() } else { F::zero() };
                                g[i * k + j] += scale * (probs[i * k + j] - t);
                            }
                        }
                    }
                }
                Op::L2Normalize { x, eps } => {
                    let xv = &nodes[x.0].value;
                    let (_, d) = xv.dims2()?;
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        for ((gr, xr), dr) in g.chunks_mut(d).zip(xv.data().chunks(d)).zip(gy.chunks(d)) {
                            let ss = xr.iter().map(|&v| v * v).sum::<F>() + *eps;
                            let n = ss.sqrt();
                            let dot = xr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<F>();
                            for ((g, &xv), &dv) in gr.iter_mut().zip(xr).zip(dr) {
                                *g += dv / n - xv * dot / (n * ss);
                            }
                        }
                    }
                }
                Op::Gather { x, sample, positions } => {
                    let (_, c, h, w) = nodes[x.0].value.dims4()?;
                    let hw = h * w;
                    let base = sample * c * hw;
                    if let Some(g) = slot(&nodes, &mut grads, *x) {
                        for (r, &p) in positions.iter().enumerate() {
                            for ch in 0..c {
                                g[base + ch * hw + p] += gy[r * c + ch];
                            }
                        }
                    }
                }
                Op::Contrastive {
                    q,
                    pos,
                    bank,
                    inv_tau,
                    probs,
                } => {
                    let qv = nodes[q.0].value.data();
                    let pv = nodes[pos.0].value.data();
                    let bv = nodes[bank.0].value.data();
                    let (m, d) = nodes[q.0].value.dims2()?;
                    let j = nodes[bank.0].value.dims2()?.0;
                    let width = 1 + j;
                    let scale = gy[0] / F::cst(m as f64) * *inv_tau;
                    // dL/dlogit, already multiplied by 1/tau and the upstream scale
                    let mut g0 = vec![F::zero(); m];
                    let mut gb = vec![F::zero(); m * j];
                    for i in 0..m {
                        g0[i] = (probs[i * width] - F::one()) * scale;
                        for jj in 0..j {
                            gb[i * j + jj] = probs[i * width + 1 + jj] * scale;
                        }
                    }
                    let mut dq = vec![F::zero(); m * d];
                    matmul(m, j, d, &gb, false, bv, false, F::zero(), &mut dq);
                    for i in 0..m {
                        for k in 0..d {
                            dq[i * d + k] += g0[i] * pv[i * d + k];
                        }
                    }
                    let mut dbank = vec![F::zero(); j * d];
                    matmul(j, m, d, &gb, true, qv, false, F::zero(), &mut dbank);
                    let mut dpos = vec![F::zero(); m * d];
                    for i in 0..m {
                        for k in 0..d {
                            dpos[i * d + k] = g0[i] * qv[i * d + k];
                        }
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *q) {
                        g.iter_mut().zip(&dq).for_each(|(g, &v)| *g += v);
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *pos) {
                        g.iter_mut().zip(&dpos).for_each(|(g, &v)| *g += v);
                    }
                    if let Some(g) = slot(&nodes, &mut grads, *bank) {
                        g.iter_mut().zip(&dbank).for_each(|(g, &v)| *g += v);
                    }
                }
            }
        }
        *self.grads.borrow_mut() = kept;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. a leaf, if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }
}
