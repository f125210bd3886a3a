use super::tensor::{Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Patch-extraction geometry for a square-kernel convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(out_row, col_offset, in_flat_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let c = self.channels;
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize) * c;
                            f(row, (ky * self.kernel + kx) * c, src);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    GradScale(Var, T),
    AddConst(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Square(Var),
    Sigmoid(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Im2col(Var, ConvGeom),
    Upsample(Var, usize),
    LayerNorm(Var, Vec<T>),
    L2Normalize(Var, Vec<T>, T),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Concat0(Vec<Var>),
    SegmentMean0(Var, Vec<(usize, usize)>),
    RepeatCols(Var, usize),
    Broadcast0(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
/// tape is always topologically sorted.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Matrix view dims `(rows, cols)` of the last two axes and the batch count.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("matmul operand must be 2-D or 3-D, got {shape:?}"),
    }
}

/// Row/column strides of a stored row-major `rows x cols` matrix, optionally
/// viewed transposed.
fn strides(cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
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

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn bcast(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let bn = vb.numel();
        assert!(
            bn > 0 && va.numel() % bn == 0 && va.shape().ends_with(vb.shape()),
            "cannot broadcast {:?} over {:?}",
            vb.shape(),
            va.shape()
        );
        let bd = vb.data();
        let data = va
            .data()
            .chunks(bn)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    /// `a + b` where `b` matches the trailing axes of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        self.bcast(a, b, Op::AddBcast(a, b), |x, y| x + y)
    }

    /// `a * b` where `b` matches the trailing axes of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        self.bcast(a, b, Op::MulBcast(a, b), |x, y| x * y)
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.item(s);
        let value = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `c`.
    pub fn grad_scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(a, Op::GradScale(a, c), |x| x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| x.recip())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x / (T::one() + (-x).exp()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.last_dim();
        let data: Vec<T> = v.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let mut shape = v.shape()[..v.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(&shape, data);
        let ng = self.ng(a);
        self.push(value, Op::SumLast(a), ng)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - m).exp();
                z += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= z;
            }
        }
        let value = Tensor::new(v.shape(), data);
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxLast(a), ng)
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor::new(v.shape(), data);
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxLast(a), ng)
    }

    /// Matrix product over the last two axes. Operands are 2-D or 3-D; a 3-D
    /// `a` against a 2-D `b` shares `b` across the batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (ga, ra, ca) = mat_dims(va.shape());
        let (gb, rb, cb) = mat_dims(vb.shape());
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", va.shape(), vb.shape());
        assert!(gb == ga || (gb == 1 && vb.shape().len() == 2), "matmul batch mismatch");
        let mut out = vec![T::zero(); ga * m * n];
        let (rsa, csa) = strides(ca, ta);
        let (rsb, csb) = strides(cb, tb);
        for g in 0..ga {
            let bo = if gb == 1 { 0 } else { g * rb * cb };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &va.data()[g * ra * ca..],
                rsa,
                csa,
                &vb.data()[bo..],
                rsb,
                csb,
                T::zero(),
                &mut out[g * m * n..],
                n as isize,
                1,
            );
        }
        let shape: Vec<usize> = if va.shape().len() == 3 {
            vec![ga, m, n]
        } else {
            vec![m, n]
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out), Op::Matmul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = permute_tensor(self.value(a), axes);
        let ng = self.ng(a);
        self.push(value, Op::Permute(a, axes.to_vec()), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2);
        self.permute(a, &[1, 0])
    }

    /// Extracts convolution patches from an NHWC tensor into rows of
    /// `[batch * out_h * out_w, kernel * kernel * channels]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 4, "im2col expects NHWC input");
        let geom = ConvGeom {
            batch: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
            kernel,
            stride,
            pad,
        };
        let rows = geom.batch * geom.out_height() * geom.out_width();
        let pl = geom.patch_len();
        let c = geom.channels;
        let mut out = vec![T::zero(); rows * pl];
        let src = v.data();
        geom.for_each_tap(|row, col, off| {
            out[row * pl + col..row * pl + col + c].copy_from_slice(&src[off..off + c]);
        });
        let ng = self.ng(x);
        self.push(Tensor::new(&[rows, pl], out), Op::Im2col(x, geom), ng)
    }

    /// Nearest-neighbour upsampling of an NHWC tensor by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 4, "upsample expects NHWC input");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(b * ho * wo * c);
        let src = v.data();
        for bi in 0..b {
            for y in 0..ho {
                for xx in 0..wo {
                    let off = ((bi * h + y / factor) * w + xx / factor) * c;
                    out.extend_from_slice(&src[off..off + c]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, ho, wo, c], out), Op::Upsample(x, factor), ng)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let c = v.last_dim();
        let eps = T::lit(eps);
        let cn = T::lit(c as f64);
        let mut out = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(v.numel() / c);
        for row in v.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / cn;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            out.extend(row.iter().map(|&r| (r - mean) * is));
        }
        let value = Tensor::new(v.shape(), out);
        let ng = self.ng(x);
        self.push(value, Op::LayerNorm(x, inv_std), ng)
    }

    /// `x / (||x|| + eps)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let c = v.last_dim();
        let eps = T::lit(eps);
        let mut out = Vec::with_capacity(v.numel());
        let mut norms = Vec::with_capacity(v.numel() / c);
        for row in v.data().chunks(c) {
            let n = row.iter().map(|&r| r * r).sum::<T>().sqrt();
            norms.push(n);
            let d = n + eps;
            out.extend(row.iter().map(|&r| r / d));
        }
        let value = Tensor::new(v.shape(), out);
        let ng = self.ng(x);
        self.push(value, Op::L2Normalize(x, norms, eps), ng)
    }

    /// Picks elements by flat index into a 1-D result.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&[idx.len()], data), Op::Gather(x, idx.to_vec()), ng)
    }

    /// Selects sub-tensors along axis 0.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        let row = v.numel() / v.shape()[0];
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, data), Op::SelectRows(x, idx.to_vec()), ng)
    }

    /// Takes `x[i]`, dropping axis 0.
    pub fn index0(&mut self, x: Var, i: usize) -> Var {
        let sel = self.select_rows(x, &[i]);
        let shape = self.shape(x)[1..].to_vec();
        self.reshape(sel, &shape)
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat0 trailing shape mismatch");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&shape, data), Op::Concat0(parts.to_vec()), ng)
    }

    /// Averages contiguous row segments `(start, len)` along axis 0.
    pub fn segment_mean0(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let v = self.value(x);
        let row = v.numel() / v.shape()[0];
        let mut data = vec![T::zero(); segments.len() * row];
        for (si, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "empty segment");
            let inv = T::lit(1.0 / len as f64);
            let dst = &mut data[si * row..(si + 1) * row];
            for r in start..start + len {
                for (d, &s) in dst.iter_mut().zip(&v.data()[r * row..(r + 1) * row]) {
                    *d += s * inv;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = segments.len();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, data), Op::SegmentMean0(x, segments.to_vec()), ng)
    }

    /// Appends an axis of size `cols`, repeating each element along it.
    pub fn repeat_cols(&mut self, x: Var, cols: usize) -> Var {
        let v = self.value(x);
        let data = v.data().iter().flat_map(|&e| std::iter::repeat_n(e, cols)).collect();
        let mut shape = v.shape().to_vec();
        shape.push(cols);
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, data), Op::RepeatCols(x, cols), ng)
    }

    /// Prepends an axis of size `n`, tiling `x` along it.
    pub fn broadcast0(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * v.numel());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, data), Op::Broadcast0(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[i].value;
        let shape = y.shape();
        let g = gy.data();
        let mk = |data: Vec<T>, shape: &[usize]| Tensor::new(shape, data);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let d = g.iter().zip(vb).map(|(&g, &b)| g * b).collect();
                    self.acc(grads, *a, mk(d, shape));
                }
                if self.ng(*b) {
                    let d = g.iter().zip(va).map(|(&g, &a)| g * a).collect();
                    self.acc(grads, *b, mk(d, shape));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                if self.ng(*a) {
                    let d = g.iter().zip(vb).map(|(&g, &b)| g / b).collect();
                    self.acc(grads, *a, mk(d, shape));
                }
                if self.ng(*b) {
                    let d = g
                        .iter()
                        .zip(vb)
                        .zip(y.data())
                        .map(|((&g, &b), &y)| -g * y / b)
                        .collect();
                    self.acc(grads, *b, mk(d, shape));
                }
            }
            Op::AddBcast(a, b) => {
                self.acc(grads, *a, gy.clone());
                if self.ng(*b) {
                    let vb = self.value(*b);
                    let mut d = vec![T::zero(); vb.numel()];
                    for chunk in g.chunks(vb.numel()) {
                        for (dst, &s) in d.iter_mut().zip(chunk) {
                            *dst += s;
                        }
                    }
                    self.acc(grads, *b, mk(d, vb.shape()));
                }
            }
            Op::MulBcast(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let bn = vb.numel();
                if self.ng(*a) {
                    let d = g
                        .chunks(bn)
                        .flat_map(|c| c.iter().zip(vb.data()).map(|(&g, &b)| g * b))
                        .collect();
                    self.acc(grads, *a, mk(d, shape));
                }
                if self.ng(*b) {
                    let mut d = vec![T::zero(); bn];
                    for (gc, ac) in g.chunks(bn).zip(va.data().chunks(bn)) {
                        for ((dst, &g), &a) in d.iter_mut().zip(gc).zip(ac) {
                            *dst += g * a;
                        }
                    }
                    self.acc(grads, *b, mk(d, vb.shape()));
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.item(*s);
                if self.ng(*a) {
                    self.acc(grads, *a, gy.map(|v| v * sv));
                }
                if self.ng(*s) {
                    let d: T = g.iter().zip(self.value(*a).data()).map(|(&g, &a)| g * a).sum();
                    self.acc(grads, *s, mk(vec![d], self.shape(*s)));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, gy.map(|v| v * c));
            }
            Op::GradScale(a, c) => {
                let c = *c;
                self.acc(grads, *a, gy.map(|v| v * c));
            }
            Op::AddConst(a) => self.acc(grads, *a, gy.clone()),
            Op::Neg(a) => self.acc(grads, *a, gy.map(|v| -v)),
            Op::Exp(a) => {
                let d = g.iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
                self.acc(grads, *a, mk(d, shape));
            }
            Op::Log(a) => {
                let d = g.iter().zip(self.value(*a).data()).map(|(&g, &x)| g / x).collect();
                self.acc(grads, *a, mk(d, shape));
            }
            Op::Recip(a) => {
                let d = g.iter().zip(y.data()).map(|(&g, &y)| -g * y * y).collect();
                self.acc(grads, *a, mk(d, shape));
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let d = g.iter().zip(self.value(*a).data()).map(|(&g, &x)| two * g * x).collect();
                self.acc(grads, *a, mk(d, shape));
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(y.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.acc(grads, *a, mk(d, shape));
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *a, mk(d, shape));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, Tensor::full(va.shape(), g[0]));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let v = g[0] / T::lit(va.numel() as f64);
                self.acc(grads, *a, Tensor::full(va.shape(), v));
            }
            Op::SumLast(a) => {
                let va = self.value(*a);
                let c = va.last_dim();
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                self.acc(grads, *a, mk(d, va.shape()));
            }
            Op::SoftmaxLast(a) => {
                let c = y.last_dim();
                let mut d = Vec::with_capacity(y.numel());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                self.acc(grads, *a, mk(d, shape));
            }
            Op::LogSoftmaxLast(a) => {
                let c = y.last_dim();
                let mut d = Vec::with_capacity(y.numel());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let gs: T = gr.iter().copied().sum();
                    d.extend(gr.iter().zip(yr).map(|(&g, &y)| g - y.exp() * gs));
                }
                self.acc(grads, *a, mk(d, shape));
            }
            Op::Matmul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, gy, grads),
            Op::Reshape(a) => {
                let d = gy.clone().reshaped(self.shape(*a));
                self.acc(grads, *a, d);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                self.acc(grads, *a, permute_tensor(gy, &inv));
            }
            Op::Im2col(x, geom) => {
                let pl = geom.patch_len();
                let c = geom.channels;
                let mut d = vec![T::zero(); self.value(*x).numel()];
                geom.for_each_tap(|row, col, off| {
                    let src = &g[row * pl + col..row * pl + col + c];
                    for (dst, &s) in d[off..off + c].iter_mut().zip(src) {
                        *dst += s;
                    }
                });
                self.acc(grads, *x, mk(d, self.shape(*x)));
            }
            Op::Upsample(x, factor) => {
                let xs = self.shape(*x);
                let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h * factor, w * factor);
                let mut d = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            let dst = ((bi * h + yy / factor) * w + xx / factor) * c;
                            let src = ((bi * ho + yy) * wo + xx) * c;
                            for k in 0..c {
                                d[dst + k] += g[src + k];
                            }
                        }
                    }
                }
                self.acc(grads, *x, mk(d, xs));
            }
            Op::LayerNorm(x, inv_std) => {
                let c = y.last_dim();
                let cn = T::lit(c as f64);
                let mut d = Vec::with_capacity(y.numel());
                for ((gr, yr), &is) in g.chunks(c).zip(y.data().chunks(c)).zip(inv_std) {
                    let mg = gr.iter().copied().sum::<T>() / cn;
                    let mgy = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / cn;
                    d.extend(gr.iter().zip(yr).map(|(&g, &y)| is * (g - mg - y * mgy)));
                }
                self.acc(grads, *x, mk(d, shape));
            }
            Op::L2Normalize(x, norms, eps) => {
                let c = y.last_dim();
                let xv = self.value(*x).data();
                let mut d = Vec::with_capacity(y.numel());
                for ((gr, xr), &n) in g.chunks(c).zip(xv.chunks(c)).zip(norms) {
                    let den = n + *eps;
                    if n > T::zero() {
                        let dot: T = gr.iter().zip(xr).map(|(&g, &x)| g * x).sum();
                        let k = dot / (den * den * n);
                        d.extend(gr.iter().zip(xr).map(|(&g, &x)| g / den - x * k));
                    } else {
                        d.extend(gr.iter().map(|&g| g / den));
                    }
                }
                self.acc(grads, *x, mk(d, shape));
            }
            Op::Gather(x, idx) => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&j, &gv) in idx.iter().zip(g) {
                    d[j] += gv;
                }
                self.acc(grads, *x, mk(d, self.shape(*x)));
            }
            Op::SelectRows(x, idx) => {
                let xv = self.value(*x);
                let row = xv.numel() / xv.shape()[0];
                let mut d = vec![T::zero(); xv.numel()];
                for (k, &j) in idx.iter().enumerate() {
                    for (dst, &s) in d[j * row..(j + 1) * row].iter_mut().zip(&g[k * row..]) {
                        *dst += s;
                    }
                }
                self.acc(grads, *x, mk(d, xv.shape()));
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, mk(g[off..off + n].to_vec(), self.shape(p)));
                    off += n;
                }
            }
            Op::SegmentMean0(x, segs) => {
                let xv = self.value(*x);
                let row = xv.numel() / xv.shape()[0];
                let mut d = vec![T::zero(); xv.numel()];
                for (si, &(start, len)) in segs.iter().enumerate() {
                    let inv = T::lit(1.0 / len as f64);
                    let src = &g[si * row..(si + 1) * row];
                    for r in start..start + len {
                        for (dst, &s) in d[r * row..(r + 1) * row].iter_mut().zip(src) {
                            *dst += s * inv;
                        }
                    }
                }
                self.acc(grads, *x, mk(d, xv.shape()));
            }
            Op::RepeatCols(x, cols) => {
                let d = g.chunks(*cols).map(|c| c.iter().copied().sum()).collect();
                self.acc(grads, *x, mk(d, self.shape(*x)));
            }
            Op::Broadcast0(x) => {
                let xv = self.value(*x);
                let mut d = vec![T::zero(); xv.numel()];
                for chunk in g.chunks(xv.numel()) {
                    for (dst, &s) in d.iter_mut().zip(chunk) {
                        *dst += s;
                    }
                }
                self.acc(grads, *x, mk(d, xv.shape()));
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (ga, ra, ca) = mat_dims(va.shape());
        let (gb, rb, cb) = mat_dims(vb.shape());
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let g = gy.data();
        let (rsa, csa) = strides(ca, ta);
        let (rsb, csb) = strides(cb, tb);
        if self.ng(a) {
            // d op(A) = dC op(B)^T, written into storage layout of A.
            let mut d = vec![T::zero(); va.numel()];
            let (rsd, csd) = if ta { (1, ca as isize) } else { (ca as isize, 1) };
            for gi in 0..ga {
                let bo = if gb == 1 { 0 } else { gi * rb * cb };
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &g[gi * m * n..],
                    n as isize,
                    1,
                    &vb.data()[bo..],
                    csb,
                    rsb,
                    T::zero(),
                    &mut d[gi * ra * ca..],
                    rsd,
                    csd,
                );
            }
            self.acc(grads, a, Tensor::new(va.shape(), d));
        }
        if self.ng(b) {
            // d op(B) = op(A)^T dC, summed over the batch when B is shared.
            let mut d = vec![T::zero(); vb.numel()];
            let (rsd, csd) = if tb { (1, cb as isize) } else { (cb as isize, 1) };
            for gi in 0..ga {
                let (bo, beta) = if gb == 1 {
                    (0, if gi == 0 { T::zero() } else { T::one() })
                } else {
                    (gi * rb * cb, T::zero())
                };
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &va.data()[gi * ra * ca..],
                    csa,
                    rsa,
                    &g[gi * m * n..],
                    n as isize,
                    1,
                    beta,
                    &mut d[bo..],
                    rsd,
                    csd,
                );
            }
            self.acc(grads, b, Tensor::new(vb.shape(), d));
        }
    }
}

fn permute_tensor<T: Real>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    assert_eq!(axes.len(), shape.len(), "permute rank mismatch");
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..t.numel() {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}
