//! Reverse-mode gradient tape.
//!
//! Every differentiable op appends a node holding its output value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in exact reverse
//! execution order and accumulates gradients into every node that depends on a
//! leaf created with `requires_grad = true`. Nodes that do not depend on such a
//! leaf are skipped entirely, so frozen weights cost no gradient work.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, AttnGrads, ConvGeom, ConvGrads, NormGeom, NormGrads};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Silu(Var),
    Sigmoid(Var),
    AddBias(Var, Var),
    AddChannel(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        geom: NormGeom,
        stats: Vec<(T, T)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`, or `None` if the loss does not
    /// depend on it (or it was not marked as requiring a gradient).
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), data.clone()).expect("gradient shape"))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        let data = self.grads.get_mut(var.0)?.take()?;
        Some(Tensor::new(self.shapes[var.0].clone(), data).expect("gradient shape"))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(v.0));
        }
        Ok(())
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape(name, self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v / (T::one() + (-v).exp()), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `x[.., S] + b[S]` where `S` is the full shape of `b`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let bd = self.value(b).data();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(bd.len()) {
            chunk.iter_mut().zip(bd).for_each(|(v, &c)| *v += c);
        }
        self.push("add_bias", value, Op::AddBias(x, b), &[x, b])
    }

    /// `x[N, C, ..] + b[N, C]`, broadcasting over the trailing axes.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() < 2 || bs != &xs[..2] {
            return Err(shape_err("add_channel", format!("{xs:?} + {bs:?}")));
        }
        let run: usize = xs[2..].iter().product();
        let bd = self.value(b).data();
        let mut value = self.value(x).clone();
        for (chunk, &c) in value.data_mut().chunks_mut(run.max(1)).zip(bd) {
            chunk.iter_mut().for_each(|v| *v += c);
        }
        self.push("add_channel", value, Op::AddChannel(x, b), &[x, b])
    }

    /// Affine map along the last axis: `x W^T + b` with `W: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let din = *xs.last().ok_or_else(|| shape_err("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(shape_err("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let dout = ws[0];
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", format!("bias {:?} vs {dout}", self.shape(b))));
            }
        }
        let m = self.value(x).numel() / din.max(1);
        let mut out = vec![T::zero(); m * dout];
        gemm(
            Mat::row_major(self.value(x).data(), m, din),
            Mat::row_major(self.value(w).data(), dout, din).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(v, &c)| *v += c);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b }, &inputs)
    }

    /// 2-D cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", format!("input {xs:?} vs kernel {ws:?}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let out_dim = |extent: usize, kernel: usize| -> Result<usize> {
            let padded = extent + 2 * pad;
            if kernel > padded {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {kernel} exceeds padded extent {padded}"),
                ));
            }
            if (padded - kernel) % stride != 0 {
                return Err(TensorError::InexactOutput {
                    op: "conv2d",
                    extent,
                    pad,
                    kernel,
                    stride,
                });
            }
            Ok((padded - kernel) / stride + 1)
        };
        let ho = out_dim(h, kh)?;
        let wo = out_dim(wd, kw)?;
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} vs {cout}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    fn norm(&mut self, name: &'static str, x: Var, gamma: Var, beta: Var, geom: NormGeom, eps: T) -> Result<Var> {
        let (out, stats) = kernels::norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &geom,
            eps,
        );
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            name,
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                geom,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Group normalization of `[N, C, ..]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(shape_err("group_norm", format!("input {xs:?} has no channel axis")));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Groups {
                op: "group_norm",
                groups,
                channels: c,
            });
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "group_norm",
                format!("affine {:?}/{:?} vs {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let run: usize = xs[2..].iter().product();
        let geom = NormGeom {
            chunk: c / groups * run,
            channels: c,
            run,
        };
        self.norm("group_norm", x, gamma, beta, geom, T::lit(eps))
    }

    /// Normalization over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let d = *self.shape(x).last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("affine vs {d} features")));
        }
        let geom = NormGeom {
            chunk: d,
            channels: d,
            run: 1,
        };
        self.norm("layer_norm", x, gamma, beta, geom, T::lit(eps))
    }

    /// `softmax(q k^T / sqrt(D)) v` per batch element, optionally masking
    /// keys after the query position.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(shape_err("attention", format!("expected rank 3: {qs:?} {ks:?} {vs:?}")));
        }
        let (n, lq, d) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        if ks[0] != n || vs[0] != n || ks[2] != d || vs[1] != lk || vs[2] != d {
            return Err(shape_err("attention", format!("q {qs:?} k {ks:?} v {vs:?}")));
        }
        if lk == 0 {
            return Err(TensorError::EmptySequence { op: "attention" });
        }
        if causal && lq != lk {
            return Err(shape_err("attention", format!("causal mask needs Lq == Lk, got {lq} vs {lk}")));
        }
        let mut probs = vec![T::zero(); n * lq * lk];
        let mut out = vec![T::zero(); n * lq * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..n {
            kernels::attention_forward(
                &qd[b * lq * d..(b + 1) * lq * d],
                &kd[b * lk * d..(b + 1) * lk * d],
                &vd[b * lk * d..(b + 1) * lk * d],
                lq,
                lk,
                d,
                causal,
                &mut probs[b * lq * lk..(b + 1) * lq * lk],
                &mut out[b * lq * d..(b + 1) * lq * d],
            );
        }
        let value = Tensor::new(vec![n, lq, d], out)?;
        self.push("attention", value, Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    /// Softmax weights of the most recent use of `attention` producing `out`.
    pub fn attention_weights(&self, out: Var) -> Option<&[T]> {
        match &self.nodes.get(out.0)?.op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// 2x2 average pooling of `[N, C, H, W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("{xs:?} is not [N, C, even, even]")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); src.len() / 4];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * wo + ox] = (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        self.push("avg_pool2", value, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("upsample2", format!("{xs:?} is not [N, C, H, W]")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len() * 4];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = plane[(oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        self.push("upsample2", value, Op::Upsample2(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) on axis {axis} of {xs:?}", start + len)));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("narrow", value, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x);
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {xs:?}")));
        }
        let (shape, data) = kernels::permute(self.value(x).data(), xs, axes);
        let value = Tensor::new(shape, data)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape.to_vec()).map_err(|_| {
            shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)))
        })?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Row lookup into a `[V, D]` table, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(shape_err("embedding", format!("table {ts:?} is not [V, D]")));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let n = self.value(x).numel().max(1);
        let value = Tensor::scalar(self.value(x).sum() / T::lit(n as f64));
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("mse", self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let total: T = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(total / T::lit(ad.len().max(1) as f64));
        self.push("mse", value, Op::Mse(a, b), &[a, b])
    }

    /// Accumulates d(loss)/d(node) for every node the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn acc_map(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(dst) = self.buf(grads, v) {
            for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, gi);
            }
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, x| x);
                self.acc_map(grads, *b, g, |_, x| x);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, x| x);
                self.acc_map(grads, *b, g, |_, x| -x);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |j, x| x * bd[j]);
                self.acc_map(grads, *b, g, |j, x| x * ad[j]);
            }
            Op::Scale(x, c) => self.acc_map(grads, *x, g, |_, v| v * *c),
            Op::AddScalar(x) => self.acc_map(grads, *x, g, |_, v| v),
            Op::Exp(x) => {
                let od = out.data();
                self.acc_map(grads, *x, g, |j, v| v * od[j]);
            }
            Op::Sigmoid(x) => {
                let od = out.data();
                self.acc_map(grads, *x, g, |j, v| v * od[j] * (T::one() - od[j]));
            }
            Op::Silu(x) => {
                let xd = self.value(*x).data();
                self.acc_map(grads, *x, g, |j, v| {
                    let s = sigmoid(xd[j]);
                    v * s * (T::one() + xd[j] * (T::one() - s))
                });
            }
            Op::AddBias(x, b) => {
                self.acc_map(grads, *x, g, |_, v| v);
                if let Some(db) = self.buf(grads, *b) {
                    let len = db.len();
                    for chunk in g.chunks(len) {
                        db.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::AddChannel(x, b) => {
                self.acc_map(grads, *x, g, |_, v| v);
                let run: usize = self.shape(*x)[2..].iter().product();
                if let Some(db) = self.buf(grads, *b) {
                    for (d, chunk) in db.iter_mut().zip(g.chunks(run.max(1))) {
                        *d += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let m = g.len() / dout.max(1);
                if let Some(dx) = self.buf(grads, *x) {
                    gemm(
                        Mat::row_major(g, m, dout),
                        Mat::row_major(self.value(*w).data(), dout, din),
                        dx,
                        true,
                    );
                }
                if let Some(dw) = self.buf(grads, *w) {
                    gemm(
                        Mat::row_major(g, m, dout).t(),
                        Mat::row_major(self.value(*x).data(), m, din),
                        dw,
                        true,
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for row in g.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dw = self.fresh(*w);
                let mut db = b.and_then(|b| self.fresh(b));
                let mut dx = self.fresh(*x);
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    ConvGrads {
                        dx: dx.as_deref_mut(),
                        dw: dw.as_deref_mut(),
                        db: db.as_deref_mut(),
                    },
                );
                self.add_into(grads, *w, dw);
                if let Some(b) = b {
                    self.add_into(grads, *b, db);
                }
                self.add_into(grads, *x, dx);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                geom,
                stats,
            } => {
                let mut dx = self.fresh(*x);
                let mut dgamma = self.fresh(*gamma);
                let mut dbeta = self.fresh(*beta);
                kernels::norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    stats,
                    g,
                    geom,
                    NormGrads {
                        dx: dx.as_deref_mut(),
                        dgamma: dgamma.as_deref_mut(),
                        dbeta: dbeta.as_deref_mut(),
                    },
                );
                self.add_into(grads, *x, dx);
                self.add_into(grads, *gamma, dgamma);
                self.add_into(grads, *beta, dbeta);
            }
            Op::Attention { q, k, v, probs } => {
                let qs = self.shape(*q);
                let (n, lq, d) = (qs[0], qs[1], qs[2]);
                let lk = self.shape(*k)[1];
                let mut dq = self.fresh(*q);
                let mut dk = self.fresh(*k);
                let mut dv = self.fresh(*v);
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                for bi in 0..n {
                    let (qr, kr) = (bi * lq * d..(bi + 1) * lq * d, bi * lk * d..(bi + 1) * lk * d);
                    kernels::attention_backward(
                        &qd[qr.clone()],
                        &kd[kr.clone()],
                        &vd[kr.clone()],
                        &probs[bi * lq * lk..(bi + 1) * lq * lk],
                        &g[qr.clone()],
                        lq,
                        lk,
                        d,
                        AttnGrads {
                            dq: dq.as_deref_mut().map(|s| &mut s[qr.clone()]),
                            dk: dk.as_deref_mut().map(|s| &mut s[kr.clone()]),
                            dv: dv.as_deref_mut().map(|s| &mut s[kr.clone()]),
                        },
                    );
                }
                self.add_into(grads, *q, dq);
                self.add_into(grads, *k, dk);
                self.add_into(grads, *v, dv);
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                if let Some(dx) = self.buf(grads, *x) {
                    for (plane, src) in dx.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = src[oy * wo + ox] * quarter;
                                let i = 2 * oy * w + 2 * ox;
                                plane[i] += v;
                                plane[i + 1] += v;
                                plane[i + w] += v;
                                plane[i + w + 1] += v;
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let wo = 2 * w;
                if let Some(dx) = self.buf(grads, *x) {
                    for (plane, src) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                        for (oy, row) in src.chunks(wo).enumerate() {
                            for (ox, &v) in row.iter().enumerate() {
                                plane[(oy / 2) * w + ox / 2] += v;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if let Some(dv) = self.buf(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            dv[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = out.shape()[*axis] * inner;
                let full = xs[*axis];
                if let Some(dx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        dx[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Permute { x, axes } => {
                let (_, back) = kernels::permute(g, out.shape(), &kernels::inverse_axes(axes));
                self.acc_map(grads, *x, &back, |_, v| v);
            }
            Op::Reshape(x) => self.acc_map(grads, *x, g, |_, v| v),
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.buf(grads, *table) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(t, &s)| *t += s);
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc_map_const(grads, *x, g0);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                let g0 = g[0] / T::lit(n as f64);
                self.acc_map_const(grads, *x, g0);
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let c = g[0] * T::lit(2.0 / ad.len().max(1) as f64);
                if let Some(da) = self.buf(grads, *a) {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += c * (ad[j] - bd[j]);
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d -= c * (ad[j] - bd[j]);
                    }
                }
            }
        }
    }

    fn fresh(&self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0]
            .needs_grad
            .then(|| vec![T::zero(); self.nodes[v.0].value.numel()])
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Option<Vec<T>>) {
        let Some(c) = contribution else { return };
        match grads[v.0].as_mut() {
            Some(existing) => existing.iter_mut().zip(&c).for_each(|(e, &x)| *e += x),
            None => grads[v.0] = Some(c),
        }
    }

    fn acc_map_const(&self, grads: &mut [Option<Vec<T>>], v: Var, c: T) {
        if let Some(dst) = self.buf(grads, v) {
            dst.iter_mut().for_each(|d| *d += c);
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}
