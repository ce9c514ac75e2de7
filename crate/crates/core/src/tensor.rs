//! Dense row-major tensors and the numeric kernels the autodiff layer is built on.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar element type. Implemented for `f32` (training) and `f64` (gradient checks).
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    /// Short name used in diagnostics.
    const NAME: &'static str;

    fn c(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = A·B` (alpha = 1, beta = 0) with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn c(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        // SAFETY: callers size the slices to cover every strided access; see `gemm_bounds`.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn c(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const MAX: usize = 16;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= MAX {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..MAX])
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed as broadcast into `target` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, yielding the
/// offsets into two strided operands.
fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        f(oa, ob);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Tensor {
                shape: self.shape.clone(),
                data,
            };
        }
        if other.data.len() == 1 && other.shape.len() <= self.shape.len() {
            let b = other.data[0];
            return Tensor {
                shape: self.shape.clone(),
                data: self.data.iter().map(|&a| f(a, b)).collect(),
            };
        }
        let shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                self.shape, other.shape
            )
        });
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = Vec::with_capacity(numel(&shape));
        for_each_offset2(&shape, &sa, &sb, |oa, ob| {
            data.push(f(self.data[oa], other.data[ob]))
        });
        Tensor { shape, data }
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let target = broadcast_shape(&self.shape, shape);
        assert_eq!(
            target.as_deref(),
            Some(shape),
            "cannot broadcast {:?} to {shape:?}",
            self.shape
        );
        let sa = broadcast_strides(&self.shape, shape);
        let zeros = vec![0; shape.len()];
        let mut data = Vec::with_capacity(numel(shape));
        for_each_offset2(shape, &sa, &zeros, |oa, _| data.push(self.data[oa]));
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Sums over the axes along which `shape` was broadcast to produce `self`.
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        assert!(
            broadcast_shape(shape, &self.shape).as_deref() == Some(&self.shape[..]),
            "cannot sum {:?} down to {shape:?}",
            self.shape
        );
        let so = broadcast_strides(shape, &self.shape);
        let si = strides(&self.shape);
        let mut data = vec![T::zero(); numel(shape)];
        for_each_offset2(&self.shape, &si, &so, |oi, oo| {
            data[oo] = data[oo] + self.data[oi];
        });
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Max along `axis`, keeping the reduced axis with extent 1.
    pub fn max_axis_keepdim(&self, axis: usize) -> Self {
        let mut shape = self.shape.clone();
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        shape[axis] = 1;
        let mut data = vec![T::neg_infinity(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    let v = self.data[base + i];
                    let slot = &mut data[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn permute(&self, axes: &[usize]) -> Self {
        assert_eq!(axes.len(), self.shape.len(), "permute rank mismatch");
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src = strides(&self.shape);
        let sp: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let zeros = vec![0; shape.len()];
        let mut data = Vec::with_capacity(self.data.len());
        for_each_offset2(&shape, &sp, &zeros, |o, _| data.push(self.data[o]));
        Tensor { shape, data }
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Self {
        let n = self.ndim();
        assert!(n >= 2, "transpose of rank-{n} tensor");
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// `[m,k] x [k,n] -> [m,n]`, optionally reading either operand transposed.
    pub fn matmul_t(&self, ta: bool, other: &Self, tb: bool) -> Self {
        assert_eq!(self.ndim(), 2, "matmul lhs must be 2-D, got {:?}", self.shape);
        assert_eq!(other.ndim(), 2, "matmul rhs must be 2-D, got {:?}", other.shape);
        let (m, k, rsa, csa) = if ta {
            (self.shape[1], self.shape[0], 1, self.shape[1] as isize)
        } else {
            (self.shape[0], self.shape[1], self.shape[1] as isize, 1)
        };
        let (k2, n, rsb, csb) = if tb {
            (other.shape[1], other.shape[0], 1, other.shape[1] as isize)
        } else {
            (other.shape[0], other.shape[1], other.shape[1] as isize, 1)
        };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, rsa, csa, &other.data, rsb, csb, &mut out, n as isize, 1);
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_t(false, other, false)
    }

    /// Batched `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn bmm(&self, other: &Self) -> Self {
        assert_eq!(self.ndim(), 3, "bmm lhs must be 3-D, got {:?}", self.shape);
        assert_eq!(other.ndim(), 3, "bmm rhs must be 3-D, got {:?}", other.shape);
        let (b, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let (b2, k2, n) = (other.shape[0], other.shape[1], other.shape[2]);
        assert!(b == b2 && k == k2, "bmm shapes {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![T::zero(); b * m * n];
        for i in 0..b {
            T::gemm(
                m,
                k,
                n,
                &self.data[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &other.data[i * k * n..(i + 1) * k * n],
                n as isize,
                1,
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        Tensor {
            shape: vec![b, m, n],
            data: out,
        }
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let base = parts[0].shape();
        for p in parts {
            assert_eq!(p.ndim(), base.len(), "concat rank mismatch");
            for (d, (&a, &b)) in p.shape().iter().zip(base).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {base:?}", p.shape());
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = base.to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor { shape, data }
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape[axis], "narrow out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let b = (o * full + start) * inner;
            data.extend_from_slice(&self.data[b..b + len * inner]);
        }
        Tensor { shape, data }
    }

    /// Zero-pads along `axis` so that `self` occupies `[start, start+len)` of an axis of extent `full`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Self {
        let len = self.shape[axis];
        assert!(start + len <= full, "pad_axis out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut data = vec![T::zero(); numel(&shape)];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Tensor { shape, data }
    }

    fn nchw(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.ndim(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Self {
        let (n, c, h, w) = self.nchw();
        let (h2, w2) = (h * 2, w * 2);
        let mut data = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        Tensor {
            shape: vec![n, c, h2, w2],
            data,
        }
    }

    /// 2x2 mean pooling of an NCHW tensor. Panics on odd spatial extents.
    pub fn downsample2x(&self) -> Self {
        let (n, c, h, w) = self.nchw();
        assert!(h % 2 == 0 && w % 2 == 0, "downsample of odd extent {h}x{w}");
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::c(0.25);
        let mut data = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    let s = src[2 * y * w + 2 * x]
                        + src[2 * y * w + 2 * x + 1]
                        + src[(2 * y + 1) * w + 2 * x]
                        + src[(2 * y + 1) * w + 2 * x + 1];
                    dst[y * w2 + x] = s * quarter;
                }
            }
        }
        Tensor {
            shape: vec![n, c, h2, w2],
            data,
        }
    }

    /// Swaps the two leading axes of a conv kernel and flips it spatially.
    /// `[O,I,k,k] -> [I,O,k,k]`; an involution.
    pub fn flip_transpose(&self) -> Self {
        let (o, i, kh, kw) = self.nchw();
        let mut data = vec![T::zero(); self.data.len()];
        for a in 0..o {
            for b in 0..i {
                for y in 0..kh {
                    for x in 0..kw {
                        data[((b * o + a) * kh + (kh - 1 - y)) * kw + (kw - 1 - x)] =
                            self.data[((a * i + b) * kh + y) * kw + x];
                    }
                }
            }
        }
        Tensor {
            shape: vec![i, o, kh, kw],
            data,
        }
    }

    /// Unfolds `[N,C,H,W]` into columns `[C*k*k, N*Ho*Wo]` for a stride-1 convolution.
    fn im2col(&self, k: usize, pad: usize) -> (Vec<T>, usize, usize) {
        let (n, c, h, w) = self.nchw();
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel {k} larger than padded input {h}x{w}");
        let ho = h + 2 * pad - k + 1;
        let wo = w + 2 * pad - k + 1;
        let cols_n = n * ho * wo;
        let mut cols = vec![T::zero(); c * k * k * cols_n];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for ni in 0..n {
                        let src = &self.data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - pad as isize;
                            let drow = &mut dst[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    /// Stride-1 2-D cross-correlation, `x: [N,I,H,W]`, `w: [O,I,k,k]`.
    pub fn conv2d(&self, weight: &Self, pad: usize) -> Self {
        let (n, c, _, _) = self.nchw();
        let (o, i, kh, kw) = weight.nchw();
        assert_eq!(kh, kw, "only square kernels are supported");
        assert_eq!(c, i, "conv2d input has {c} channels, kernel expects {i}");
        let k = kh;
        let (cols, ho, wo) = self.im2col(k, pad);
        let cols_n = n * ho * wo;
        let ckk = c * k * k;
        // out[o, n*ho*wo]
        let mut out = vec![T::zero(); o * cols_n];
        T::gemm(
            o,
            ckk,
            cols_n,
            &weight.data,
            ckk as isize,
            1,
            &cols,
            cols_n as isize,
            1,
            &mut out,
            cols_n as isize,
            1,
        );
        let plane = ho * wo;
        let mut data = vec![T::zero(); n * o * plane];
        for oi in 0..o {
            for ni in 0..n {
                let src = &out[oi * cols_n + ni * plane..oi * cols_n + (ni + 1) * plane];
                data[(ni * o + oi) * plane..(ni * o + oi + 1) * plane].copy_from_slice(src);
            }
        }
        Tensor {
            shape: vec![n, o, ho, wo],
            data,
        }
    }

    /// Gradient of `<conv2d(x, w, pad), g>` with respect to `w`. `self` is `x`.
    pub fn conv2d_weight_grad(&self, g: &Self, pad: usize, k: usize) -> Self {
        let (n, c, _, _) = self.nchw();
        let (gn, o, gh, gw) = g.nchw();
        assert_eq!(n, gn, "batch mismatch in conv2d_weight_grad");
        let (cols, ho, wo) = self.im2col(k, pad);
        assert!(ho == gh && wo == gw, "gradient extent {gh}x{gw} vs output {ho}x{wo}");
        let plane = ho * wo;
        let cols_n = n * plane;
        let mut gmat = vec![T::zero(); o * cols_n];
        for ni in 0..n {
            for oi in 0..o {
                let src = &g.data[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
                gmat[oi * cols_n + ni * plane..oi * cols_n + (ni + 1) * plane].copy_from_slice(src);
            }
        }
        let ckk = c * k * k;
        let mut out = vec![T::zero(); o * ckk];
        // out = gmat[o, cols_n] x cols^T[cols_n, ckk]
        T::gemm(
            o,
            cols_n,
            ckk,
            &gmat,
            cols_n as isize,
            1,
            &cols,
            1,
            cols_n as isize,
            &mut out,
            ckk as isize,
            1,
        );
        Tensor {
            shape: vec![o, c, k, k],
            data: out,
        }
    }
}
