use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Element type of the engine: `f32` for training, `f64` for gradient
/// checks.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Send + Sync + 'static
{
    /// `C <- alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
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

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix views for [`matmul`].
#[derive(Clone, Copy)]
pub(crate) enum Trans {
    N,
    T,
}

/// `C (m x n) <- A' B' + beta C` where `A'` is `A` (m x k, row-major) or
/// `A^T` (A stored k x m), likewise for `B`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    beta: T,
    c: &mut [T],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::N => (k as isize, 1),
        Trans::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::N => (n as isize, 1),
        Trans::T => (1, k as isize),
    };
    // SAFETY: the slices cover the described matrices (checked above) and
    // `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "{} values for shape {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[T] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Concatenates along channels.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    debug_assert!(parts.iter().all(|p| p.n == n && p.h == h && p.w == w));
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut out = Tensor::zeros(n, c, h, w);
    let item = c * h * w;
    for b in 0..n {
        let mut off = b * item;
        for p in parts {
            let src = p.item(b);
            out.data[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    out
}

/// Inverse of [`concat`] for gradients: splits `g` into channel blocks.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    debug_assert_eq!(channels.iter().sum::<usize>(), g.c);
    let mut outs: Vec<Tensor<T>> = channels
        .iter()
        .map(|&c| Tensor::zeros(g.n, c, g.h, g.w))
        .collect();
    let hw = g.h * g.w;
    for b in 0..g.n {
        let src = g.item(b);
        let mut off = 0;
        for o in outs.iter_mut() {
            let len = o.c * hw;
            o.item_mut(b).copy_from_slice(&src[off..off + len]);
            off += len;
        }
    }
    outs
}
