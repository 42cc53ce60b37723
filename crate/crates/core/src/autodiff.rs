//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] walks the recording in reverse and accumulates
//! gradients into every node that (transitively) depends on a leaf created
//! with `requires_grad = true`.
//!
//! Layout conventions:
//! - matrices are `[rows, cols]`;
//! - images / feature maps are channel-first `[C, H, W]`;
//! - "row" ops (`add_row`, `softmax`, `layer_norm`, ...) act on the last axis.

use crate::linalg::{self, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

/// Geometry of a multi-level deformable gather.
#[derive(Debug, Clone)]
pub struct DeformSpec {
    /// `(height, width)` of every level; level values are `[height * width, channels]`.
    pub level_dims: Vec<(usize, usize)>,
    pub heads: usize,
    pub points: usize,
    /// Per query; masked queries produce zeros and receive no gradient.
    pub mask: Vec<bool>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    ClampMin(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MaskedMax {
        inputs: Vec<Var>,
        fallback: Var,
        winner: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    AvgPool(Var, usize),
    Upsample(Var),
    Deform {
        values: Vec<Var>,
        loc: Var,
        attn: Var,
        spec: DeformSpec,
    },
    Focal {
        logits: Var,
        targets: Vec<bool>,
        alpha: Option<T>,
        gamma: T,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn bilinear_corners<T: Scalar>(x: T, y: T) -> (isize, isize, T, T) {
    let x0 = x.floor();
    let y0 = y.floor();
    (
        x0.to_isize().unwrap_or(isize::MIN / 2),
        y0.to_isize().unwrap_or(isize::MIN / 2),
        x - x0,
        y - y0,
    )
}

/// Shapes of one convolution.
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

/// Patch matrix `[c * kh * kw, ho * wo]`; out-of-image taps are zero.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * hw];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = conv_valid(g.ho, g.h, ki, g.s, g.p);
            for kj in 0..g.kw {
                let (xlo, xhi) = conv_valid(g.wo, g.w, kj, g.s, g.p);
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                for oy in ylo..yhi {
                    let iy = oy * g.s + ki - g.p;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        dst[ox] = src[ox * g.s + kj - g.p];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back to the image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = conv_valid(g.ho, g.h, ki, g.s, g.p);
            for kj in 0..g.kw {
                let (xlo, xhi) = conv_valid(g.wo, g.w, kj, g.s, g.p);
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                for oy in ylo..yhi {
                    let iy = oy * g.s + ki - g.p;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[ox * g.s + kj - g.p] += src[ox];
                    }
                }
            }
        }
    }
    x
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Range of output positions `o` with `o*s + k - p` inside `[0, n)`.
fn conv_valid(out: usize, n: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi_num = n as isize - 1 + p as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / s + 1).min(out);
    (lo.min(hi), hi)
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `a[.., d] + row[d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let d = self.value(row).len();
        let va = self.value(a);
        assert_eq!(*va.shape().last().unwrap(), d, "add_row width mismatch");
        let r = self.value(row).data();
        let data = va
            .data()
            .chunks(d)
            .flat_map(|c| c.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let v = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// `a[.., d] * row[d]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let d = self.value(row).len();
        let va = self.value(a);
        assert_eq!(*va.shape().last().unwrap(), d, "mul_row width mismatch");
        let r = self.value(row).data();
        let data = va
            .data()
            .chunks(d)
            .flat_map(|c| c.iter().zip(r).map(|(&x, &y)| x * y))
            .collect();
        let v = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.dim(0), va.dim(1));
        let n = vb.dim(1);
        assert_eq!(vb.dim(0), k, "matmul inner dim mismatch");
        let out = linalg::matmul(MatRef::new(va.data(), m, k), MatRef::new(vb.data(), k, n));
        let v = Tensor::from_vec(&[m, n], out).unwrap();
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.dim(0), va.dim(1));
        let n = vb.dim(0);
        assert_eq!(vb.dim(1), k, "matmul_bt inner dim mismatch");
        let out = linalg::matmul(MatRef::new(va.data(), m, k), MatRef::new(vb.data(), n, k).t());
        let v = Tensor::from_vec(&[m, n], out).unwrap();
        self.push(v, Op::MatMulBT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.dim(0), va.dim(1));
        let d = va.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let v = Tensor::from_vec(&[n, m], out).unwrap();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    /// `max(a, lo)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = *va.shape().last().unwrap();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let v = Tensor::from_vec(va.shape(), out).unwrap();
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Normalise the last axis to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let va = self.value(a);
        let d = *va.shape().last().unwrap();
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(va.len());
        let mut inv_std = Vec::with_capacity(va.len() / d);
        for row in va.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&x| (x - mean) * is));
        }
        let v = Tensor::from_vec(va.shape(), xhat.clone()).unwrap();
        self.push(v, Op::LayerNorm { x: a, xhat, inv_std }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Columns `start..start+len` of a `[m, n]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (m, n) = (va.dim(0), va.dim(1));
        assert!(start + len <= n, "slice_cols out of range");
        let d = va.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let v = Tensor::from_vec(&[m, len], out).unwrap();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dim(1)).collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let vp = self.value(p);
                assert_eq!(vp.dim(0), m, "concat_cols row mismatch");
                out.extend_from_slice(&vp.data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::from_vec(&[m, n], out).unwrap();
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let va = self.value(a);
        let n = va.dim(1);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&va.data()[r * n..(r + 1) * n]);
        }
        let v = Tensor::from_vec(&[rows.len(), n], out).unwrap();
        self.push(v, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Element-wise max over `inputs` (each `[rows, cols]`), skipping rows an
    /// input marks invalid. Rows with no valid input take `fallback`.
    pub fn masked_max(&mut self, inputs: &[Var], valid: &[Vec<bool>], fallback: Var) -> Var {
        assert_eq!(inputs.len(), valid.len());
        let vf = self.value(fallback);
        let (rows, cols) = (vf.dim(0), vf.dim(1));
        let mut out = vf.data().to_vec();
        let mut winner = vec![usize::MAX; rows * cols];
        for (i, (&inp, ok)) in inputs.iter().zip(valid).enumerate() {
            let vi = self.value(inp);
            assert_eq!(vi.shape(), vf.shape(), "masked_max shape mismatch");
            for r in 0..rows {
                if !ok[r] {
                    continue;
                }
                for c in 0..cols {
                    let idx = r * cols + c;
                    let x = vi.data()[idx];
                    if winner[idx] == usize::MAX || x > out[idx] {
                        out[idx] = x;
                        winner[idx] = i;
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[rows, cols], out).unwrap();
        let mut parents = inputs.to_vec();
        parents.push(fallback);
        self.push(
            v,
            Op::MaskedMax {
                inputs: inputs.to_vec(),
                fallback,
                winner,
            },
            &parents,
        )
    }

    /// 2D convolution of `x: [C, H, W]` with `w: [O, C, kh, kw]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (o, cw, kh, kw) = (vw.dim(0), vw.dim(1), vw.dim(2), vw.dim(3));
        assert_eq!(c, cw, "conv2d channel mismatch");
        let Conv2dSpec { stride: s, pad: p } = spec;
        let (ho, wo) = (conv_out(h, kh, s, p), conv_out(wd, kw, s, p));
        let geo = ConvGeometry { c, h, w: wd, kh, kw, s, p, ho, wo };
        let cols = im2col(vx.data(), &geo);
        let mut out = vec![T::zero(); o * ho * wo];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (oi, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bd[oi]);
            }
        }
        let patch = c * kh * kw;
        linalg::gemm(
            MatRef::new(vw.data(), o, patch),
            MatRef::new(&cols, patch, ho * wo),
            &mut out,
            true,
        );
        let v = Tensor::from_vec(&[o, ho, wo], out).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(v, Op::Conv2d { x, w, b, spec }, &parents)
    }

    /// Mean pooling with window and stride `k`; partial windows at the
    /// border average over their in-bounds cells.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
        let mut out = vec![T::zero(); c * ho * wo];
        let d = vx.data();
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y1, x1) = ((oy * k + k).min(h), (ox * k + k).min(w));
                    let mut s = T::zero();
                    for iy in oy * k..y1 {
                        for ix in ox * k..x1 {
                            s += d[(ci * h + iy) * w + ix];
                        }
                    }
                    let n = T::of(((y1 - oy * k) * (x1 - ox * k)) as f64);
                    out[(ci * ho + oy) * wo + ox] = s / n;
                }
            }
        }
        let v = Tensor::from_vec(&[c, ho, wo], out).unwrap();
        self.push(v, Op::AvgPool(x, k), &[x])
    }

    /// Nearest-neighbour resize of `[C, h, w]` to `[C, out_h, out_w]`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let d = vx.data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ci in 0..c {
            for oy in 0..out_h {
                let iy = oy * h / out_h;
                for ox in 0..out_w {
                    out.push(d[(ci * h + iy) * w + ox * w / out_w]);
                }
            }
        }
        let v = Tensor::from_vec(&[c, out_h, out_w], out).unwrap();
        self.push(v, Op::Upsample(x), &[x])
    }

    /// Multi-head, multi-level bilinear gather.
    ///
    /// `values[l]` is `[H_l * W_l, D]`, `loc` is `[N, heads, L, K, 2]`
    /// holding `(x, y)` pixel coordinates on each level (pixel centres at
    /// integers), and `attn` is `[N, heads, L, K]`. Head `h` reads channel
    /// slice `h*D/heads .. (h+1)*D/heads`. Samples outside a level read zero.
    /// Output is `[N, D]`.
    pub fn deform_sample(&mut self, values: &[Var], loc: Var, attn: Var, spec: DeformSpec) -> Var {
        let nl = values.len();
        assert_eq!(nl, spec.level_dims.len(), "level count mismatch");
        let d = self.value(values[0]).dim(1);
        let n = self.value(loc).dim(0);
        let (nh, k) = (spec.heads, spec.points);
        assert_eq!(d % nh, 0, "channels not divisible by heads");
        assert_eq!(self.value(loc).shape(), &[n, nh, nl, k, 2]);
        assert_eq!(self.value(attn).shape(), &[n, nh, nl, k]);
        assert_eq!(spec.mask.len(), n);
        let dh = d / nh;
        let mut out = vec![T::zero(); n * d];
        let locd = self.value(loc).data();
        let attd = self.value(attn).data();
        for q in 0..n {
            if !spec.mask[q] {
                continue;
            }
            for h in 0..nh {
                let orow = &mut out[q * d + h * dh..q * d + (h + 1) * dh];
                for (l, &vv) in values.iter().enumerate() {
                    let (lh, lw) = spec.level_dims[l];
                    let vd = self.nodes[vv.0].value.data();
                    for kk in 0..k {
                        let idx = ((q * nh + h) * nl + l) * k + kk;
                        let a = attd[idx];
                        let (x0, y0, fx, fy) = bilinear_corners(locd[2 * idx], locd[2 * idx + 1]);
                        for (dy, dx, wgt) in corner_weights(fx, fy) {
                            let (yy, xx) = (y0 + dy, x0 + dx);
                            if yy < 0 || xx < 0 || yy >= lh as isize || xx >= lw as isize {
                                continue;
                            }
                            let base = (yy as usize * lw + xx as usize) * d + h * dh;
                            let s = a * wgt;
                            for (o, &v) in orow.iter_mut().zip(&vd[base..base + dh]) {
                                *o += s * v;
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[n, d], out).unwrap();
        let mut parents = values.to_vec();
        parents.push(loc);
        parents.push(attn);
        self.push(
            v,
            Op::Deform {
                values: values.to_vec(),
                loc,
                attn,
                spec,
            },
            &parents,
        )
    }

    /// Sum of sigmoid focal losses over every logit.
    ///
    /// `alpha = None` disables the class-balance factor. Probabilities are
    /// clamped to `[eps, 1 - eps]`; the clamp blocks gradient where active.
    pub fn focal_loss_sum(
        &mut self,
        logits: Var,
        targets: &[bool],
        alpha: Option<T>,
        gamma: T,
        eps: T,
    ) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), targets.len(), "focal target count");
        let total = vl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| focal_term(x, t, alpha, gamma, eps).0)
            .sum();
        let v = Tensor::scalar(total);
        self.push(
            v,
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
                eps,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(delta) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_vec(self.value(v).shape(), delta).unwrap());
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gd.to_vec());
                acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gd.to_vec());
                acc(grads, *b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(grads, *a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(grads, *b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => acc(grads, *a, gd.iter().map(|&x| x * *s).collect()),
            Op::AddRow(a, r) => {
                acc(grads, *a, gd.to_vec());
                if self.wants(*r) {
                    let d = self.value(*r).len();
                    let mut dr = vec![T::zero(); d];
                    for chunk in gd.chunks(d) {
                        for (o, &x) in dr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    acc(grads, *r, dr);
                }
            }
            Op::MulRow(a, r) => {
                let rv = self.value(*r).data();
                let d = rv.len();
                if self.wants(*a) {
                    let da = gd
                        .chunks(d)
                        .flat_map(|c| c.iter().zip(rv).map(|(&g, &y)| g * y))
                        .collect();
                    acc(grads, *a, da);
                }
                if self.wants(*r) {
                    let av = self.value(*a).data();
                    let mut dr = vec![T::zero(); d];
                    for (gc, ac) in gd.chunks(d).zip(av.chunks(d)) {
                        for ((o, &g), &x) in dr.iter_mut().zip(gc).zip(ac) {
                            *o += g * x;
                        }
                    }
                    acc(grads, *r, dr);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                let gm = MatRef::new(gd, m, n);
                if self.wants(*a) {
                    // dA = G B^T
                    acc(grads, *a, linalg::matmul(gm, MatRef::new(vb.data(), k, n).t()));
                }
                if self.wants(*b) {
                    // dB = A^T G
                    acc(grads, *b, linalg::matmul(MatRef::new(va.data(), m, k).t(), gm));
                }
            }
            Op::MatMulBT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(0));
                let gm = MatRef::new(gd, m, n);
                if self.wants(*a) {
                    // dA = G B
                    acc(grads, *a, linalg::matmul(gm, MatRef::new(vb.data(), n, k)));
                }
                if self.wants(*b) {
                    // dB = G^T A
                    acc(grads, *b, linalg::matmul(gm.t(), MatRef::new(va.data(), m, k)));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.dim(1), g.dim(0));
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gd[j * m + i];
                    }
                }
                acc(grads, *a, da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(
                    grads,
                    *a,
                    gd.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(
                    grads,
                    *a,
                    gd.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                );
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > *lo { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *g.shape().last().unwrap();
                let mut da = Vec::with_capacity(y.len());
                for (gr, yr) in gd.chunks(d).zip(y.chunks(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    da.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                acc(grads, *a, da);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = *g.shape().last().unwrap();
                let dn = T::of(d as f64);
                let mut dx = Vec::with_capacity(xhat.len());
                for ((gr, xr), &is) in gd.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgx = gr.iter().zip(xr).map(|(&g, &x)| g * x).sum::<T>() / dn;
                    dx.extend(gr.iter().zip(xr).map(|(&g, &xh)| is * (g - mg - xh * mgx)));
                }
                acc(grads, *x, dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![gd[0]; n]);
            }
            Op::Reshape(a) => acc(grads, *a, gd.to_vec()),
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (m, n) = (va.dim(0), va.dim(1));
                let len = g.dim(1);
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (g.dim(0), g.dim(1));
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dim(1);
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&gd[i * n + off..i * n + off + w]);
                        }
                        acc(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let va = self.value(*a);
                let n = va.dim(1);
                let mut da = vec![T::zero(); va.len()];
                for (j, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        da[r * n + c] += gd[j * n + c];
                    }
                }
                acc(grads, *a, da);
            }
            Op::MaskedMax {
                inputs,
                fallback,
                winner,
            } => {
                for (i, &inp) in inputs.iter().enumerate() {
                    if !self.wants(inp) {
                        continue;
                    }
                    let d = gd
                        .iter()
                        .zip(winner)
                        .map(|(&g, &w)| if w == i { g } else { T::zero() })
                        .collect();
                    acc(grads, inp, d);
                }
                if self.wants(*fallback) {
                    let d = gd
                        .iter()
                        .zip(winner)
                        .map(|(&g, &w)| if w == usize::MAX { g } else { T::zero() })
                        .collect();
                    acc(grads, *fallback, d);
                }
            }
            Op::Conv2d { x, w, b, spec } => self.conv2d_backward(g, *x, *w, *b, *spec, grads, &acc),
            Op::AvgPool(x, k) => {
                let vx = self.value(*x);
                let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
                let (ho, wo) = (g.dim(1), g.dim(2));
                let mut dx = vec![T::zero(); vx.len()];
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let (y1, x1) = ((oy * k + k).min(h), (ox * k + k).min(w));
                            let n = T::of(((y1 - oy * k) * (x1 - ox * k)) as f64);
                            let gv = gd[(ci * ho + oy) * wo + ox] / n;
                            for iy in oy * k..y1 {
                                for ix in ox * k..x1 {
                                    dx[(ci * h + iy) * w + ix] += gv;
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Upsample(x) => {
                let vx = self.value(*x);
                let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
                let (oh, ow) = (g.dim(1), g.dim(2));
                let mut dx = vec![T::zero(); vx.len()];
                for ci in 0..c {
                    for oy in 0..oh {
                        let iy = oy * h / oh;
                        for ox in 0..ow {
                            dx[(ci * h + iy) * w + ox * w / ow] += gd[(ci * oh + oy) * ow + ox];
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Deform {
                values,
                loc,
                attn,
                spec,
            } => self.deform_backward(g, values, *loc, *attn, spec, grads, &acc),
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
                eps,
            } => {
                let x = self.value(*logits).data();
                let dl = x
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| gd[0] * focal_term(x, t, *alpha, *gamma, *eps).1)
                    .collect();
                acc(grads, *logits, dl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        grads: &mut [Option<Tensor<T>>],
        acc: &dyn Fn(&mut [Option<Tensor<T>>], Var, Vec<T>),
    ) {
        let vx = self.value(x);
        let vw = self.value(w);
        let (c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (o, _, kh, kw) = (vw.dim(0), vw.dim(1), vw.dim(2), vw.dim(3));
        let (ho, wo) = (g.dim(1), g.dim(2));
        let Conv2dSpec { stride: s, pad: p } = spec;
        let gd = g.data();
        let (xd, wdat) = (vx.data(), vw.data());
        if let Some(b) = b {
            if self.wants(b) {
                let db = gd.chunks(ho * wo).map(|c| c.iter().copied().sum()).collect();
                acc(grads, b, db);
            }
        }
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let geo = ConvGeometry { c, h, w: wd, kh, kw, s, p, ho, wo };
        let patch = c * kh * kw;
        let gm = MatRef::new(gd, o, ho * wo);
        let dw = if want_w {
            let cols = im2col(xd, &geo);
            linalg::matmul(gm, MatRef::new(&cols, patch, ho * wo).t())
        } else {
            Vec::new()
        };
        let dx = if want_x {
            let dcols = linalg::matmul(MatRef::new(wdat, o, patch).t(), gm);
            col2im(&dcols, &geo)
        } else {
            Vec::new()
        };
        if want_x {
            acc(grads, x, dx);
        }
        if want_w {
            acc(grads, w, dw);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        g: &Tensor<T>,
        values: &[Var],
        loc: Var,
        attn: Var,
        spec: &DeformSpec,
        grads: &mut [Option<Tensor<T>>],
        acc: &dyn Fn(&mut [Option<Tensor<T>>], Var, Vec<T>),
    ) {
        let nl = values.len();
        let (n, d) = (g.dim(0), g.dim(1));
        let (nh, k) = (spec.heads, spec.points);
        let dh = d / nh;
        let gd = g.data();
        let locd = self.value(loc).data();
        let attd = self.value(attn).data();
        let mut dvals: Vec<Vec<T>> = values
            .iter()
            .map(|&v| {
                if self.wants(v) {
                    vec![T::zero(); self.value(v).len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        let mut dloc = vec![T::zero(); locd.len()];
        let mut dattn = vec![T::zero(); attd.len()];
        let zero = T::zero();
        for q in 0..n {
            if !spec.mask[q] {
                continue;
            }
            for h in 0..nh {
                let grow = &gd[q * d + h * dh..q * d + (h + 1) * dh];
                for (l, &vv) in values.iter().enumerate() {
                    let (lh, lw) = spec.level_dims[l];
                    let vd = self.value(vv).data();
                    let want_v = !dvals[l].is_empty();
                    for kk in 0..k {
                        let idx = ((q * nh + h) * nl + l) * k + kk;
                        let a = attd[idx];
                        let (x0, y0, fx, fy) = bilinear_corners(locd[2 * idx], locd[2 * idx + 1]);
                        // corner values dotted with the upstream gradient
                        let mut gv = [zero; 4];
                        for (ci, (dy, dx, wgt)) in corner_weights(fx, fy).into_iter().enumerate() {
                            let (yy, xx) = (y0 + dy, x0 + dx);
                            if yy < 0 || xx < 0 || yy >= lh as isize || xx >= lw as isize {
                                continue;
                            }
                            let base = (yy as usize * lw + xx as usize) * d + h * dh;
                            gv[ci] = grow.iter().zip(&vd[base..base + dh]).map(|(&g, &v)| g * v).sum();
                            if want_v {
                                let s = a * wgt;
                                for (o, &g) in dvals[l][base..base + dh].iter_mut().zip(grow) {
                                    *o += s * g;
                                }
                            }
                        }
                        let one = T::one();
                        let [g00, g01, g10, g11] = gv;
                        dattn[idx] += (one - fx) * (one - fy) * g00
                            + fx * (one - fy) * g01
                            + (one - fx) * fy * g10
                            + fx * fy * g11;
                        dloc[2 * idx] += a * ((one - fy) * (g01 - g00) + fy * (g11 - g10));
                        dloc[2 * idx + 1] += a * ((one - fx) * (g10 - g00) + fx * (g11 - g01));
                    }
                }
            }
        }
        for (&v, dv) in values.iter().zip(dvals) {
            if !dv.is_empty() {
                acc(grads, v, dv);
            }
        }
        acc(grads, loc, dloc);
        acc(grads, attn, dattn);
    }
}

/// `(dy, dx, weight)` for the four bilinear neighbours, ordered
/// `(0,0) (0,1) (1,0) (1,1)`.
fn corner_weights<T: Scalar>(fx: T, fy: T) -> [(isize, isize, T); 4] {
    let one = T::one();
    [
        (0, 0, (one - fx) * (one - fy)),
        (0, 1, fx * (one - fy)),
        (1, 0, (one - fx) * fy),
        (1, 1, fx * fy),
    ]
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Focal loss term and its derivative with respect to the logit.
pub(crate) fn focal_term<T: Scalar>(x: T, target: bool, alpha: Option<T>, gamma: T, eps: T) -> (T, T) {
    let one = T::one();
    let p_raw = sigmoid(x);
    let p = p_raw.max(eps).min(one - eps);
    let clamped = p != p_raw;
    let (pt, sign) = if target { (p, one) } else { (one - p, -one) };
    let at = match alpha {
        Some(a) if target => a,
        Some(a) => one - a,
        None => one,
    };
    let m = one - pt;
    let logpt = pt.ln();
    let loss = -at * m.powf(gamma) * logpt;
    if clamped {
        return (loss, T::zero());
    }
    // dL/dpt
    let mut dpt = -at * m.powf(gamma) / pt;
    if gamma != T::zero() {
        dpt += at * gamma * m.powf(gamma - one) * logpt;
    }
    let dpt_dx = sign * p * (one - p);
    (loss, dpt * dpt_dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` with respect to every input element.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(ii, tt)| {
                            let mut tt = tt.clone();
                            if ii == i {
                                tt.data_mut()[j] += delta;
                            }
                            tape.leaf(tt, true)
                        })
                        .collect();
                    let o = f(&mut tape, &vars);
                    tape.value(o).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "input {i} elem {j}: fd {fd} analytic {an}"
                );
            }
        }
    }

    /// Reduce to a scalar through fixed random weights so every output element matters.
    fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(v).to_vec();
        let w = tape.constant(rand_tensor(&mut rng, &shape));
        let p = tape.mul(v, w);
        tape.sum(p)
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])], |t, v| {
            let m = t.matmul(v[0], v[1]);
            weighted_sum(t, m, 9)
        });
        check(vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4])], |t, v| {
            let m = t.matmul_bt(v[0], v[1]);
            weighted_sum(t, m, 9)
        });
    }

    #[test]
    fn elementwise_and_row_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[3, 5])],
            |t, v| {
                let a = t.add_row(v[0], v[1]);
                let b = t.mul_row(a, v[1]);
                let c = t.tanh(b);
                let d = t.sigmoid(v[2]);
                let e = t.mul(c, d);
                let f = t.sub(e, v[2]);
                let g = t.scale(f, 1.7);
                let h = t.transpose(g);
                weighted_sum(t, h, 3)
            },
        );
    }

    #[test]
    fn softmax_layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![rand_tensor(&mut rng, &[4, 6])], |t, v| {
            let a = t.softmax(v[0]);
            let b = t.layer_norm(v[0], 1e-5);
            let c = t.add(a, b);
            weighted_sum(t, c, 4)
        });
    }

    #[test]
    fn slicing_gather_and_max_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[4, 6])],
            |t, v| {
                let s = t.slice_cols(v[0], 2, 3);
                let s2 = t.slice_cols(v[1], 0, 3);
                let c = t.concat_cols(&[s, s2]);
                let gth = t.gather_rows(c, &[3, 1, 1]);
                let valid = vec![vec![true, false, true, false], vec![true, true, false, false]];
                let m = t.masked_max(&[v[0], v[1]], &valid, v[2]);
                let a = weighted_sum(t, gth, 5);
                let b = weighted_sum(t, m, 6);
                t.add(a, b)
            },
        );
    }

    #[test]
    fn conv_pool_upsample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
            check(
                vec![
                    rand_tensor(&mut rng, &[2, 7, 6]),
                    rand_tensor(&mut rng, &[3, 2, 3, 3]),
                    rand_tensor(&mut rng, &[3]),
                ],
                |t, v| {
                    let c = t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride, pad });
                    let r = t.relu(c);
                    let p = t.avg_pool(r, 2);
                    let u = t.upsample_nearest(p, 5, 7);
                    weighted_sum(t, u, 7)
                },
            );
        }
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 5, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let out = tape.conv2d(xv, wv, None, Conv2dSpec { stride: 2, pad: 1 });
        let o = tape.value(out);
        assert_eq!(o.shape(), &[3, 3, 3]);
        for oi in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if iy >= 0 && ix >= 0 && iy < 5 && ix < 6 {
                                    s += w.at(&[oi, ci, ki, kj]) * x.at(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((o.at(&[oi, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deform_sample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, nh, nl, k, d) = (3, 2, 2, 2, 4);
        let mut loc = Tensor::zeros(&[n, nh, nl, k, 2]);
        for x in loc.data_mut() {
            *x = rng.random_range(-0.7..4.6);
        }
        let attn = rand_tensor(&mut rng, &[n, nh, nl, k]);
        let spec = DeformSpec {
            level_dims: vec![(4, 5), (2, 3)],
            heads: nh,
            points: k,
            mask: vec![true, false, true],
        };
        check(
            vec![rand_tensor(&mut rng, &[20, d]), rand_tensor(&mut rng, &[6, d]), loc, attn],
            |t, v| {
                let o = t.deform_sample(&v[..2], v[2], v[3], spec.clone());
                weighted_sum(t, o, 8)
            },
        );
    }

    #[test]
    fn focal_and_clamp_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let targets = vec![true, false, false, true, false, true];
        check(vec![rand_tensor(&mut rng, &[2, 3]).map(|x| 3.0 * x)], |t, v| {
            t.focal_loss_sum(v[0], &targets, Some(0.25), 2.0, 1e-7)
        });
        check(vec![rand_tensor(&mut rng, &[2, 3])], |t, v| {
            let a = t.abs(v[0]);
            let r = t.relu(v[0]);
            let c = t.clamp_min(r, 0.1);
            let s = t.add(a, c);
            weighted_sum(t, s, 10)
        });
    }

    #[test]
    fn gradients_skip_constants() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::full(&[2], 2.0), true);
        let c = tape.mul(a, b);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
