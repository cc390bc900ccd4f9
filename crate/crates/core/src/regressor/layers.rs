//! Network building blocks: batched conv (im2col + GEMM), batch
//! normalization, rectifier, and fully connected layers with explicit
//! backward passes and SGD-with-momentum state.
//!
//! Everything is generic over the element type: f32 for production
//! training speed, f64 so tests can verify backpropagation against
//! central finite differences at tight tolerances.

use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scalar type the network runs on.
pub trait Elem:
    Copy
    + Default
    + PartialOrd
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    /// Row/column-strided GEMM: C = alpha * A * B + beta * C.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major GEMM helper: c(m x n) = alpha * a(m x k) * b(k x n) + beta * c.
fn gemm_rm<E: Elem>(m: usize, k: usize, n: usize, alpha: E, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched feature map in channel-major CBHW layout:
/// `data[(ch * batch + b) * (h * w) + y * w + x]`.
///
/// Channel-major keeps each channel's batch slab contiguous, which makes
/// batch-norm reductions single linear scans and lets conv GEMM write its
/// output without a transpose.
#[derive(Debug, Clone)]
pub struct Tensor<E> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self { c, b, h, w, data: vec![E::ZERO; c * b * h * w] }
    }

    pub fn resize(&mut self, c: usize, b: usize, h: usize, w: usize) {
        self.c = c;
        self.b = b;
        self.h = h;
        self.w = w;
        self.data.clear();
        self.data.resize(c * b * h * w, E::ZERO);
    }

    pub fn len(&self) -> usize {
        self.c * self.b * self.h * self.w
    }
}

fn uniform_init<E: Elem>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| E::from_f64(rng.random_range(-bound..bound)))
        .collect()
}

// ==== CONVOLUTION ====

#[derive(Debug, Clone)]
pub struct Conv2d<E> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Row-major (out_c) x (in_c * k * k).
    pub weight: Vec<E>,
    pub bias: Vec<E>,
    pub grad_w: Vec<E>,
    pub grad_b: Vec<E>,
    pub vel_w: Vec<E>,
    pub vel_b: Vec<E>,
}

impl<E: Elem> Conv2d<E> {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_c * k * k;
        let weight = uniform_init(rng, out_c * fan_in, fan_in);
        let bias = uniform_init(rng, out_c, fan_in);
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            grad_w: vec![E::ZERO; out_c * fan_in],
            grad_b: vec![E::ZERO; out_c],
            vel_w: vec![E::ZERO; out_c * fan_in],
            vel_b: vec![E::ZERO; out_c],
            weight,
            bias,
        }
    }

    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Unfolds `x` into `col` as (in_c * k * k) x (b * oh * ow), column
    /// index ordered (batch, oy, ox).
    fn im2col(&self, x: &Tensor<E>, oh: usize, ow: usize, col: &mut [E]) {
        let n = x.b * oh * ow;
        let (h, w) = (x.h, x.w);
        for ci in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let out_row = &mut col[row * n..(row + 1) * n];
                    for b in 0..x.b {
                        let src_base = (ci * x.b + b) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let dst = &mut out_row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            if iy < 0 || iy >= h as isize {
                                dst.fill(E::ZERO);
                                continue;
                            }
                            let src_row = src_base + iy as usize * w;
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                *d = if ix < 0 || ix >= w as isize {
                                    E::ZERO
                                } else {
                                    x.data[src_row + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds a column-space gradient back onto the input gradient
    /// (scatter-add; `dx` must be zeroed by the caller).
    fn col2im(&self, col: &[E], dx: &mut Tensor<E>, oh: usize, ow: usize) {
        let n = dx.b * oh * ow;
        let (h, w) = (dx.h, dx.w);
        for ci in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src_row_all = &col[row * n..(row + 1) * n];
                    for b in 0..dx.b {
                        let dst_base = (ci * dx.b + b) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &src_row_all[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            let dst_row = dst_base + iy as usize * w;
                            for (ox, s) in src.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    let d = &mut dx.data[dst_row + ix as usize];
                                    *d = *d + *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fills `col` with the unfolded input (kept by the caller so
    /// [`Self::backward`] can skip re-unfolding) and writes the output.
    pub fn forward(&self, x: &Tensor<E>, col: &mut Vec<E>, out: &mut Tensor<E>) {
        debug_assert_eq!(x.c, self.in_c);
        let oh = self.out_size(x.h);
        let ow = self.out_size(x.w);
        out.resize(self.out_c, x.b, oh, ow);
        let n = x.b * oh * ow;
        let kdim = self.col_rows();
        col.resize(kdim * n, E::ZERO);
        self.im2col(x, oh, ow, col);
        // CBHW output equals the row-major (out_c) x n GEMM result.
        gemm_rm(self.out_c, kdim, n, E::ONE, &self.weight, col, E::ZERO, &mut out.data);
        for m in 0..self.out_c {
            let bias = self.bias[m];
            for v in &mut out.data[m * n..(m + 1) * n] {
                *v = *v + bias;
            }
        }
    }

    /// Accumulates parameter gradients (overwriting) and, unless `dx` is
    /// None, the input gradient. `col` must hold the unfolded input from
    /// the matching [`Self::forward`] call; `dcol` is scratch.
    pub fn backward(
        &mut self,
        d_out: &Tensor<E>,
        col: &[E],
        dcol: &mut Vec<E>,
        dx: Option<&mut Tensor<E>>,
    ) {
        let oh = d_out.h;
        let ow = d_out.w;
        let n = d_out.b * oh * ow;
        let kdim = self.col_rows();
        debug_assert_eq!(col.len(), kdim * n);
        // dW(m x k) = dY(m x n) * col^T(n x k)
        unsafe {
            E::gemm(
                self.out_c,
                n,
                kdim,
                E::ONE,
                d_out.data.as_ptr(),
                n as isize,
                1,
                col.as_ptr(),
                1,
                n as isize,
                E::ZERO,
                self.grad_w.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        for m in 0..self.out_c {
            let mut s = E::ZERO;
            for v in &d_out.data[m * n..(m + 1) * n] {
                s = s + *v;
            }
            self.grad_b[m] = s;
        }
        if let Some(dx) = dx {
            // dx dims must be set by the caller (backward runs the layer
            // chain in reverse, so the forward input shape is known there).
            debug_assert_eq!(dx.c, self.in_c);
            debug_assert_eq!(dx.b, d_out.b);
            dcol.resize(kdim * n, E::ZERO);
            // col-space gradient (k x n) = W^T(k x m) * dY(m x n).
            unsafe {
                E::gemm(
                    kdim,
                    self.out_c,
                    n,
                    E::ONE,
                    self.weight.as_ptr(),
                    1,
                    kdim as isize,
                    d_out.data.as_ptr(),
                    n as isize,
                    1,
                    E::ZERO,
                    dcol.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            self.col2im(dcol, dx, oh, ow);
        }
    }

    pub fn sgd_step(&mut self, lr: E, momentum: E) {
        sgd_update(&mut self.weight, &self.grad_w, &mut self.vel_w, lr, momentum);
        sgd_update(&mut self.bias, &self.grad_b, &mut self.vel_b, lr, momentum);
    }
}

// ==== BATCH NORMALIZATION ====

#[derive(Debug, Clone)]
pub struct BatchNorm2d<E> {
    pub c: usize,
    pub gamma: Vec<E>,
    pub beta: Vec<E>,
    pub running_mean: Vec<E>,
    /// Biased (population) variance estimate.
    pub running_var: Vec<E>,
    pub grad_g: Vec<E>,
    pub grad_b: Vec<E>,
    pub vel_g: Vec<E>,
    pub vel_b: Vec<E>,
    momentum: f64,
    eps: f64,
    saved_xhat: Vec<E>,
    saved_invstd: Vec<E>,
}

impl<E: Elem> BatchNorm2d<E> {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            gamma: vec![E::ONE; c],
            beta: vec![E::ZERO; c],
            running_mean: vec![E::ZERO; c],
            running_var: vec![E::ONE; c],
            grad_g: vec![E::ZERO; c],
            grad_b: vec![E::ZERO; c],
            vel_g: vec![E::ZERO; c],
            vel_b: vec![E::ZERO; c],
            momentum: 0.1,
            eps: 1e-5,
            saved_xhat: Vec::new(),
            saved_invstd: vec![E::ZERO; c],
        }
    }

    /// Normalizes with batch statistics, updates running averages, and
    /// caches what the backward pass needs.
    pub fn forward_train(&mut self, x: &mut Tensor<E>) {
        debug_assert_eq!(x.c, self.c);
        let n = x.b * x.h * x.w;
        let eps = E::from_f64(self.eps);
        self.saved_xhat.resize(x.len(), E::ZERO);
        let inv_n = E::from_f64(1.0 / n as f64);
        let mom = E::from_f64(self.momentum);
        let keep = E::from_f64(1.0 - self.momentum);
        for ch in 0..self.c {
            let slab = &mut x.data[ch * n..(ch + 1) * n];
            let mut mean = E::ZERO;
            for v in slab.iter() {
                mean = mean + *v;
            }
            mean = mean * inv_n;
            let mut var = E::ZERO;
            for v in slab.iter() {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let invstd = E::ONE / (var + eps).sqrt();
            self.saved_invstd[ch] = invstd;
            self.running_mean[ch] = self.running_mean[ch] * keep + mean * mom;
            self.running_var[ch] = self.running_var[ch] * keep + var * mom;
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            let xhat_slab = &mut self.saved_xhat[ch * n..(ch + 1) * n];
            for (v, xh) in slab.iter_mut().zip(xhat_slab.iter_mut()) {
                let h = (*v - mean) * invstd;
                *xh = h;
                *v = g * h + b;
            }
        }
    }

    /// Normalizes with the running averages; no state is written.
    pub fn forward_eval(&self, x: &mut Tensor<E>) {
        debug_assert_eq!(x.c, self.c);
        let n = x.b * x.h * x.w;
        let eps = E::from_f64(self.eps);
        for ch in 0..self.c {
            let invstd = E::ONE / (self.running_var[ch] + eps).sqrt();
            let mean = self.running_mean[ch];
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            for v in &mut x.data[ch * n..(ch + 1) * n] {
                *v = g * (*v - mean) * invstd + b;
            }
        }
    }

    /// In-place gradient transform; valid only after a train-mode forward.
    pub fn backward(&mut self, d: &mut Tensor<E>) {
        let n = d.b * d.h * d.w;
        assert_eq!(self.saved_xhat.len(), d.len(), "backward without train-mode forward");
        let inv_n = E::from_f64(1.0 / n as f64);
        for ch in 0..self.c {
            let dy = &mut d.data[ch * n..(ch + 1) * n];
            let xhat = &self.saved_xhat[ch * n..(ch + 1) * n];
            let mut sum_dy = E::ZERO;
            let mut sum_dy_xhat = E::ZERO;
            for (g, xh) in dy.iter().zip(xhat.iter()) {
                sum_dy = sum_dy + *g;
                sum_dy_xhat = sum_dy_xhat + *g * *xh;
            }
            self.grad_b[ch] = sum_dy;
            self.grad_g[ch] = sum_dy_xhat;
            let scale = self.gamma[ch] * self.saved_invstd[ch] * inv_n;
            let nn = E::from_f64(n as f64);
            for (g, xh) in dy.iter_mut().zip(xhat.iter()) {
                *g = scale * (nn * *g - sum_dy - *xh * sum_dy_xhat);
            }
        }
    }

    pub fn sgd_step(&mut self, lr: E, momentum: E) {
        sgd_update(&mut self.gamma, &self.grad_g, &mut self.vel_g, lr, momentum);
        sgd_update(&mut self.beta, &self.grad_b, &mut self.vel_b, lr, momentum);
    }
}

// ==== RECTIFIER ====

pub fn relu_forward<E: Elem>(x: &mut Tensor<E>) {
    for v in &mut x.data {
        if *v < E::ZERO {
            *v = E::ZERO;
        }
    }
}

/// `out` must be the forward output; gradient is zeroed where the
/// rectifier clipped.
pub fn relu_backward<E: Elem>(d: &mut Tensor<E>, out: &Tensor<E>) {
    for (g, y) in d.data.iter_mut().zip(out.data.iter()) {
        if !(*y > E::ZERO) {
            *g = E::ZERO;
        }
    }
}

/// Residual join: main = max(0, main + shortcut).
pub fn add_relu_forward<E: Elem>(main: &mut Tensor<E>, shortcut: &Tensor<E>) {
    debug_assert_eq!(main.len(), shortcut.len());
    for (m, s) in main.data.iter_mut().zip(shortcut.data.iter()) {
        let v = *m + *s;
        *m = if v > E::ZERO { v } else { E::ZERO };
    }
}

// ==== FULLY CONNECTED ====

#[derive(Debug, Clone)]
pub struct Linear<E> {
    pub in_f: usize,
    pub out_f: usize,
    /// Row-major (out_f) x (in_f).
    pub weight: Vec<E>,
    pub bias: Vec<E>,
    pub grad_w: Vec<E>,
    pub grad_b: Vec<E>,
    pub vel_w: Vec<E>,
    pub vel_b: Vec<E>,
}

impl<E: Elem> Linear<E> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_f,
            out_f,
            weight: uniform_init(rng, out_f * in_f, in_f),
            bias: vec![E::ZERO; out_f],
            grad_w: vec![E::ZERO; out_f * in_f],
            grad_b: vec![E::ZERO; out_f],
            vel_w: vec![E::ZERO; out_f * in_f],
            vel_b: vec![E::ZERO; out_f],
        }
    }

    /// `x` is row-major (b) x (in_f); writes row-major (b) x (out_f).
    pub fn forward(&self, x: &[E], b: usize, out: &mut Vec<E>) {
        out.resize(b * self.out_f, E::ZERO);
        // out = X * W^T
        unsafe {
            E::gemm(
                b,
                self.in_f,
                self.out_f,
                E::ONE,
                x.as_ptr(),
                self.in_f as isize,
                1,
                self.weight.as_ptr(),
                1,
                self.in_f as isize,
                E::ZERO,
                out.as_mut_ptr(),
                self.out_f as isize,
                1,
            );
        }
        for row in out.chunks_exact_mut(self.out_f) {
            for (v, bias) in row.iter_mut().zip(self.bias.iter()) {
                *v = *v + *bias;
            }
        }
    }

    pub fn backward(&mut self, x: &[E], d_out: &[E], b: usize, dx: &mut [E]) {
        // dW(out x in) = dY^T(out x b) * X(b x in)
        unsafe {
            E::gemm(
                self.out_f,
                b,
                self.in_f,
                E::ONE,
                d_out.as_ptr(),
                1,
                self.out_f as isize,
                x.as_ptr(),
                self.in_f as isize,
                1,
                E::ZERO,
                self.grad_w.as_mut_ptr(),
                self.in_f as isize,
                1,
            );
        }
        self.grad_b.fill(E::ZERO);
        for row in d_out.chunks_exact(self.out_f) {
            for (g, v) in self.grad_b.iter_mut().zip(row.iter()) {
                *g = *g + *v;
            }
        }
        // dX(b x in) = dY(b x out) * W(out x in)
        gemm_rm(b, self.out_f, self.in_f, E::ONE, d_out, &self.weight, E::ZERO, dx);
    }

    pub fn sgd_step(&mut self, lr: E, momentum: E) {
        sgd_update(&mut self.weight, &self.grad_w, &mut self.vel_w, lr, momentum);
        sgd_update(&mut self.bias, &self.grad_b, &mut self.vel_b, lr, momentum);
    }
}

/// Classic momentum: v = mu * v + g; p -= lr * v.
fn sgd_update<E: Elem>(params: &mut [E], grads: &[E], vel: &mut [E], lr: E, momentum: E) {
    for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(vel.iter_mut()) {
        *v = momentum * *v + *g;
        *p = *p - lr * *v;
    }
}
