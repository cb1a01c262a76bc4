//! Minimal neural-network kernels: matrix products, im2col convolution,
//! group/batch normalization, SiLU/ReLU and Adam. Everything is written
//! against [`Real`] so gradient checks can run the identical code in f64.
//!
//! Layers follow one convention: `forward` is pure (`&self`), training
//! callers keep the layer inputs around and hand them back to `backward`,
//! which accumulates into each parameter's `grad` buffer and returns the
//! gradient with respect to the layer input.

use crate::num::{real, Real};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// matrix kernels
// ---------------------------------------------------------------------------

/// Lane-blocked dot product; the fixed-width inner loop vectorizes.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let i = c * LANES;
        let ca = &a[i..i + LANES];
        let cb = &b[i..i + LANES];
        for l in 0..LANES {
            acc[l] = ca[l].mul_add(cb[l], acc[l]);
        }
    }
    let mut s = T::zero();
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// c[m,n] += a[m,k] * b[k,n]
///
/// Column tiles keep the four active output rows L1-resident while each
/// b row segment is shared across the row block. Per-element accumulation
/// order (ascending k) is unchanged by the tiling.
pub fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    const TILE: usize = 512;
    let blocks = m / 4;
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + TILE).min(n);
        let width = n1 - n0;
        for bi in 0..blocks {
            let i = bi * 4;
            let (r0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            let c0 = &mut r0[n0..n1];
            let c1 = &mut r1[n0..n1];
            let c2 = &mut r2[n0..n1];
            let c3 = &mut r3[n0..n1];
            for kk in 0..k {
                let b_seg = &b[kk * n + n0..kk * n + n1];
                let a0 = a[i * k + kk];
                let a1 = a[(i + 1) * k + kk];
                let a2 = a[(i + 2) * k + kk];
                let a3 = a[(i + 3) * k + kk];
                for j in 0..width {
                    let bv = b_seg[j];
                    c0[j] = a0.mul_add(bv, c0[j]);
                    c1[j] = a1.mul_add(bv, c1[j]);
                    c2[j] = a2.mul_add(bv, c2[j]);
                    c3[j] = a3.mul_add(bv, c3[j]);
                }
            }
        }
        for i in blocks * 4..m {
            let c_seg = &mut c[i * n + n0..i * n + n1];
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_seg = &b[kk * n + n0..kk * n + n1];
                for (cv, &bv) in c_seg.iter_mut().zip(b_seg.iter()) {
                    *cv = aik.mul_add(bv, *cv);
                }
            }
        }
        n0 = n1;
    }
}

/// c[m,p] += a[m,n] * b[p,n]^T
///
/// Tiles over the shared dimension keep the four active a-row segments
/// L1-resident while b streams through once per row block.
pub fn matmul_abt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    const L: usize = 8;
    const TILE: usize = 1024;
    let blocks = m / 4;
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + TILE).min(n);
        for bi in 0..blocks {
            let i = bi * 4;
            let a0 = &a[i * n + n0..i * n + n1];
            let a1 = &a[(i + 1) * n + n0..(i + 1) * n + n1];
            let a2 = &a[(i + 2) * n + n0..(i + 2) * n + n1];
            let a3 = &a[(i + 3) * n + n0..(i + 3) * n + n1];
            let width = n1 - n0;
            for j in 0..p {
                let b_seg = &b[j * n + n0..j * n + n1];
                let mut acc0 = [T::zero(); L];
                let mut acc1 = [T::zero(); L];
                let mut acc2 = [T::zero(); L];
                let mut acc3 = [T::zero(); L];
                let chunks = width / L;
                for ch in 0..chunks {
                    let o = ch * L;
                    let bs = &b_seg[o..o + L];
                    let s0 = &a0[o..o + L];
                    let s1 = &a1[o..o + L];
                    let s2 = &a2[o..o + L];
                    let s3 = &a3[o..o + L];
                    for l in 0..L {
                        acc0[l] = s0[l].mul_add(bs[l], acc0[l]);
                        acc1[l] = s1[l].mul_add(bs[l], acc1[l]);
                        acc2[l] = s2[l].mul_add(bs[l], acc2[l]);
                        acc3[l] = s3[l].mul_add(bs[l], acc3[l]);
                    }
                }
                let reduce = |acc: &[T; L], a_seg: &[T]| {
                    let mut s = T::zero();
                    for l in 0..L {
                        s += acc[l];
                    }
                    for jj in chunks * L..width {
                        s = a_seg[jj].mul_add(b_seg[jj], s);
                    }
                    s
                };
                c[i * p + j] += reduce(&acc0, a0);
                c[(i + 1) * p + j] += reduce(&acc1, a1);
                c[(i + 2) * p + j] += reduce(&acc2, a2);
                c[(i + 3) * p + j] += reduce(&acc3, a3);
            }
        }
        for i in blocks * 4..m {
            let a_seg = &a[i * n + n0..i * n + n1];
            for j in 0..p {
                let b_seg = &b[j * n + n0..j * n + n1];
                c[i * p + j] += dot(a_seg, b_seg);
            }
        }
        n0 = n1;
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
///
/// Four b rows advance together so each c row is revisited once per
/// block; per-element accumulation order is unchanged.
pub fn matmul_atb_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let blocks = m / 4;
    for bi in 0..blocks {
        let i = bi * 4;
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for j in 0..k {
            let a0 = a[i * k + j];
            let a1 = a[(i + 1) * k + j];
            let a2 = a[(i + 2) * k + j];
            let a3 = a[(i + 3) * k + j];
            let c_row = &mut c[j * n..(j + 1) * n];
            for jj in 0..n {
                let mut v = a0.mul_add(b0[jj], c_row[jj]);
                v = a1.mul_add(b1[jj], v);
                v = a2.mul_add(b2[jj], v);
                v = a3.mul_add(b3[jj], v);
                c_row[jj] = v;
            }
        }
    }
    for i in blocks * 4..m {
        let b_row = &b[i * n..(i + 1) * n];
        for j in 0..k {
            let aij = a[i * k + j];
            let c_row = &mut c[j * n..(j + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = aij.mul_add(bv, *cv);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Named parameter with an accumulated gradient buffer. `trainable = false`
/// marks buffers (e.g. batch-norm running statistics) that serialize with
/// the model but are never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// He-normal initialization.
fn he_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut().iter_mut() {
        *v = T::from_f64c(rng.normal_f64() * std);
    }
    t
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// y = x * sigmoid(x), elementwise over a fresh tensor.
pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut().iter_mut() {
        *v = *v * sigmoid(*v);
    }
    y
}

/// Gradient of SiLU given the pre-activation input.
pub fn silu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data().iter()) {
        let s = sigmoid(xv);
        *gv = *gv * (s + xv * s * (T::one() - s));
    }
    g
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub fn relu_backward_inplace<T: Real>(pre: &[T], grad: &mut [T]) {
    for (g, &p) in grad.iter_mut().zip(pre.iter()) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// Fully connected layer over row-major [batch, in] activations.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub w: Param<T>, // [in, out]
    pub b: Param<T>, // [out]
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), he_init(&[in_dim, out_dim], in_dim, rng)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    /// y[batch, out] = x[batch, in] * w + b
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut y = vec![T::zero(); batch * self.out_dim];
        matmul_acc(&mut y, x, self.w.value.data(), batch, self.in_dim, self.out_dim);
        for row in y.chunks_exact_mut(self.out_dim) {
            for (v, &b) in row.iter_mut().zip(self.b.value.data().iter()) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns grad wrt x.
    pub fn backward(&mut self, x: &[T], grad_out: &[T], batch: usize) -> Vec<T> {
        // grad_w[in, out] += x^T[in, batch] * grad_out[batch, out]
        matmul_atb_acc(
            self.w.grad.data_mut(),
            x,
            grad_out,
            batch,
            self.in_dim,
            self.out_dim,
        );
        for row in grad_out.chunks_exact(self.out_dim) {
            for (g, &v) in self.b.grad.data_mut().iter_mut().zip(row.iter()) {
                *g += v;
            }
        }
        // grad_x[batch, in] = grad_out[batch, out] * w^T[out, in]
        let mut grad_x = vec![T::zero(); batch * self.in_dim];
        matmul_abt_acc(
            &mut grad_x,
            grad_out,
            self.w.value.data(),
            batch,
            self.out_dim,
            self.in_dim,
        );
        grad_x
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// 2D convolution over [C, H, W] tensors via im2col.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub w: Param<T>, // [out, in*k*k]
    pub b: Param<T>, // [out]
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            w: Param::new(format!("{name}.w"), he_init(&[out_ch, fan_in], fan_in, rng)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Valid output-column range [ox_lo, ox_hi) for a kernel column kx:
    /// the columns whose source index ox*stride + kx - pad lands inside
    /// the image row.
    fn ox_range(&self, kx: usize, w: usize, w_out: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if w + self.pad >= kx + 1 {
            ((w + self.pad - kx - 1) / self.stride + 1).min(w_out)
        } else {
            0
        };
        let lo = lo.min(w_out);
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &Tensor<T>, h_out: usize, w_out: usize) -> Vec<T> {
        let (h, w) = x.hw();
        let k = self.kernel;
        let n = h_out * w_out;
        let mut cols = vec![T::zero(); self.in_ch * k * k * n];
        for c in 0..self.in_ch {
            let plane = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row =
                        &mut cols[((c * k + ky) * k + kx) * n..((c * k + ky) * k + kx + 1) * n];
                    let (ox_lo, ox_hi) = self.ox_range(kx, w, w_out);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    for oy in 0..h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * w_out + ox_lo..oy * w_out + ox_hi];
                        let ix0 = ox_lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            dst.copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for (d, s) in dst
                                .iter_mut()
                                .zip(src[ix0..].iter().step_by(self.stride))
                            {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, h_out: usize, w_out: usize) -> Tensor<T> {
        let k = self.kernel;
        let n = h_out * w_out;
        let mut x = Tensor::zeros(&[self.in_ch, h, w]);
        for c in 0..self.in_ch {
            let plane = x.channel_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..((c * k + ky) * k + kx + 1) * n];
                    let (ox_lo, ox_hi) = self.ox_range(kx, w, w_out);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    for oy in 0..h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * w_out + ox_lo..oy * w_out + ox_hi];
                        let ix0 = ox_lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            let seg = &mut dst[ix0..ix0 + (ox_hi - ox_lo)];
                            for (d, s) in seg.iter_mut().zip(src.iter()) {
                                *d += *s;
                            }
                        } else {
                            for (s, d) in src
                                .iter()
                                .zip(dst[ix0..].iter_mut().step_by(self.stride))
                            {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = x.hw();
        let (h_out, w_out) = self.out_hw(h, w);
        let n = h_out * w_out;
        let cols = self.im2col(x, h_out, w_out);
        let mut y = Tensor::zeros(&[self.out_ch, h_out, w_out]);
        matmul_acc(
            y.data_mut(),
            self.w.value.data(),
            &cols,
            self.out_ch,
            self.in_ch * self.kernel * self.kernel,
            n,
        );
        for c in 0..self.out_ch {
            let b = self.b.value.data()[c];
            for v in y.channel_mut(c) {
                *v += b;
            }
        }
        y
    }

    /// Recomputes the column matrix from the cached input.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let (h, w) = x.hw();
        let (h_out, w_out) = grad_out.hw();
        let n = h_out * w_out;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let cols = self.im2col(x, h_out, w_out);
        // grad_w[out, kdim] += grad_out[out, n] * cols[kdim, n]^T
        matmul_abt_acc(
            self.w.grad.data_mut(),
            grad_out.data(),
            &cols,
            self.out_ch,
            n,
            kdim,
        );
        for c in 0..self.out_ch {
            let mut s = T::zero();
            for v in grad_out.channel(c) {
                s += *v;
            }
            self.b.grad.data_mut()[c] += s;
        }
        // grad_cols[kdim, n] = w[out, kdim]^T * grad_out[out, n]
        let mut grad_cols = vec![T::zero(); kdim * n];
        matmul_atb_acc(
            &mut grad_cols,
            self.w.value.data(),
            grad_out.data(),
            self.out_ch,
            kdim,
            n,
        );
        self.col2im(&grad_cols, h, w, h_out, w_out)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

// ---------------------------------------------------------------------------
// group norm
// ---------------------------------------------------------------------------

/// Group normalization over [C, H, W]; batch-size independent, so feature
/// extraction behaves the same no matter how images are batched.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    /// normalized activations before scale/shift
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(name: &str, channels: usize, rng: &mut Rng) -> Self {
        let _ = rng;
        let groups = if channels % 8 == 0 { 8 } else { 1 };
        GroupNorm {
            gamma: Param::new(format!("{name}.g"), Tensor::filled(&[channels], T::one())),
            beta: Param::new(format!("{name}.b"), Tensor::zeros(&[channels])),
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, GroupNormCache<T>) {
        let (h, w) = x.hw();
        let per_group = self.channels / self.groups;
        let group_len = per_group * h * w;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let seg = &mut xhat.data_mut()[g * group_len..(g + 1) * group_len];
            let mut mean = T::zero();
            for v in seg.iter() {
                mean += *v;
            }
            mean /= T::from_usize_c(group_len);
            let mut var = T::zero();
            for v in seg.iter() {
                let d = *v - mean;
                var += d * d;
            }
            var /= T::from_usize_c(group_len);
            let istd = T::one() / (var + real::<T>(self.eps)).sqrt();
            for v in seg.iter_mut() {
                *v = (*v - mean) * istd;
            }
            inv_std.push(istd);
        }
        let mut y = xhat.clone();
        for c in 0..self.channels {
            let ga = self.gamma.value.data()[c];
            let be = self.beta.value.data()[c];
            for v in y.channel_mut(c) {
                *v = *v * ga + be;
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let (h, w) = grad_out.hw();
        let per_group = self.channels / self.groups;
        let group_len = per_group * h * w;

        for c in 0..self.channels {
            let mut dg = T::zero();
            let mut db = T::zero();
            for (go, xh) in grad_out.channel(c).iter().zip(cache.xhat.channel(c).iter()) {
                dg += *go * *xh;
                db += *go;
            }
            self.gamma.grad.data_mut()[c] += dg;
            self.beta.grad.data_mut()[c] += db;
        }

        // dxhat = grad_out * gamma;
        // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut dxhat = grad_out.clone();
        for c in 0..self.channels {
            let ga = self.gamma.value.data()[c];
            for v in dxhat.channel_mut(c) {
                *v *= ga;
            }
        }
        let mut dx = Tensor::zeros(grad_out.shape());
        for g in 0..self.groups {
            let rng_slice = g * group_len..(g + 1) * group_len;
            let d = &dxhat.data()[rng_slice.clone()];
            let xh = &cache.xhat.data()[rng_slice.clone()];
            let istd = cache.inv_std[g];
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for i in 0..group_len {
                mean_d += d[i];
                mean_dx += d[i] * xh[i];
            }
            mean_d /= T::from_usize_c(group_len);
            mean_dx /= T::from_usize_c(group_len);
            let out = &mut dx.data_mut()[rng_slice];
            for i in 0..group_len {
                out[i] = istd * (d[i] - mean_d - xh[i] * mean_dx);
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ---------------------------------------------------------------------------
// batch norm (1d, for the pixel MLPs)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BatchNorm1d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> BatchNorm1d<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        BatchNorm1d {
            gamma: Param::new(format!("{name}.g"), Tensor::filled(&[dim], T::one())),
            beta: Param::new(format!("{name}.b"), Tensor::zeros(&[dim])),
            running_mean: Param::buffer(format!("{name}.rm"), Tensor::zeros(&[dim])),
            running_var: Param::buffer(format!("{name}.rv"), Tensor::filled(&[dim], T::one())),
            dim,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training forward over [batch, dim]; updates running statistics.
    pub fn forward_train(&mut self, x: &[T], batch: usize) -> (Vec<T>, BatchNormCache<T>) {
        let d = self.dim;
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for row in x.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        let nb = T::from_usize_c(batch);
        for m in mean.iter_mut() {
            *m /= nb;
        }
        for row in x.chunks_exact(d) {
            for j in 0..d {
                let dv = row[j] - mean[j];
                var[j] += dv * dv;
            }
        }
        for v in var.iter_mut() {
            *v /= nb;
        }
        // running stats use the unbiased variance
        let unbias = if batch > 1 {
            T::from_usize_c(batch) / T::from_usize_c(batch - 1)
        } else {
            T::one()
        };
        let mom = real::<T>(self.momentum);
        for j in 0..d {
            let rm = self.running_mean.value.data_mut();
            rm[j] = (T::one() - mom) * rm[j] + mom * mean[j];
            let rv = self.running_var.value.data_mut();
            rv[j] = (T::one() - mom) * rv[j] + mom * var[j] * unbias;
        }
        let mut inv_std = vec![T::zero(); d];
        for j in 0..d {
            inv_std[j] = T::one() / (var[j] + real::<T>(self.eps)).sqrt();
        }
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for (i, row) in x.chunks_exact(d).enumerate() {
            for j in 0..d {
                let xh = (row[j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = xh;
                y[i * d + j] = xh * self.gamma.value.data()[j] + self.beta.value.data()[j];
            }
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    /// Inference forward using frozen running statistics.
    pub fn forward_eval(&self, x: &[T]) -> Vec<T> {
        let d = self.dim;
        let mut y = vec![T::zero(); x.len()];
        let rm = self.running_mean.value.data();
        let rv = self.running_var.value.data();
        let mut scale = vec![T::zero(); d];
        let mut shift = vec![T::zero(); d];
        for j in 0..d {
            let istd = T::one() / (rv[j] + real::<T>(self.eps)).sqrt();
            scale[j] = self.gamma.value.data()[j] * istd;
            shift[j] = self.beta.value.data()[j] - rm[j] * scale[j];
        }
        for (yr, xr) in y.chunks_exact_mut(d).zip(x.chunks_exact(d)) {
            for j in 0..d {
                yr[j] = xr[j] * scale[j] + shift[j];
            }
        }
        y
    }

    pub fn backward(
        &mut self,
        cache: &BatchNormCache<T>,
        grad_out: &[T],
        batch: usize,
    ) -> Vec<T> {
        let d = self.dim;
        let nb = T::from_usize_c(batch);
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for (i, row) in grad_out.chunks_exact(d).enumerate() {
            for j in 0..d {
                dgamma[j] += row[j] * cache.xhat[i * d + j];
                dbeta[j] += row[j];
            }
        }
        for j in 0..d {
            self.gamma.grad.data_mut()[j] += dgamma[j];
            self.beta.grad.data_mut()[j] += dbeta[j];
        }
        // dx = (gamma * inv_std / batch) * (batch*dy - sum(dy) - xhat * sum(dy*xhat))
        let mut dx = vec![T::zero(); grad_out.len()];
        for j in 0..d {
            let coef = self.gamma.value.data()[j] * cache.inv_std[j] / nb;
            for i in 0..batch {
                let dy = grad_out[i * d + j];
                dx[i * d + j] =
                    coef * (nb * dy - dbeta[j] - cache.xhat[i * d + j] * dgamma[j]);
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

// ---------------------------------------------------------------------------
// timestep embedding
// ---------------------------------------------------------------------------

/// Sinusoidal timestep embedding: [cos(t*w_i), sin(t*w_i)] with log-spaced
/// frequencies.
pub fn sinusoidal_embedding<T: Real>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[dim]);
    let data = out.data_mut();
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = T::from_f64c(arg.cos());
        data[half + i] = T::from_f64c(arg.sin());
    }
    out
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment buffers are kept in parameter
/// traversal order, which is stable for a fixed architecture.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update using each parameter's accumulated gradient
    /// scaled by `grad_scale` (1/batch for mean-of-sums accumulation).
    pub fn step(&mut self, params: &mut [&mut Param<T>], grad_scale: f64) {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(vec![T::zero(); p.value.len()]);
                self.v.push(vec![T::zero(); p.value.len()]);
            }
        }
        self.step_count += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step_count as i32);
        let bc2 = 1.0 - b2.powi(self.step_count as i32);
        let lr = self.lr;
        let scale = T::from_f64c(grad_scale);
        for (idx, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..value.len() {
                let g = (grad[i] * scale).to_f64c();
                let mi = b1 * m[i].to_f64c() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64c() + (1.0 - b2) * g * g;
                m[i] = T::from_f64c(mi);
                v[i] = T::from_f64c(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                value[i] = T::from_f64c(value[i].to_f64c() - update);
            }
        }
    }

    /// Moment buffers, exposed for checkpointing of resumable training.
    pub fn state(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step_count: usize, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }
}
