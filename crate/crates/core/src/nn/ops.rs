use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    for v in &mut x.data {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    x
}

/// Masks `g` in place by the ReLU output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, mut g: Tensor<T>) -> Tensor<T> {
    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
        if !(yv > T::zero()) {
            *gv = T::zero();
        }
    }
    g
}

/// `clamp(slope * x + 1/2, 0, 1)`; slope 1/6 is the common "hard sigmoid".
pub fn hardsigmoid<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let (k, half) = (T::c(slope), T::c(0.5));
    let mut y = x.clone();
    for v in &mut y.data {
        // comparisons rather than max/min so NaN propagates
        let z = *v * k + half;
        *v = if z < T::zero() {
            T::zero()
        } else if z > T::one() {
            T::one()
        } else {
            z
        };
    }
    y
}

pub fn hardsigmoid_backward<T: Scalar>(x: &Tensor<T>, mut g: Tensor<T>, slope: f64) -> Tensor<T> {
    let (k, half) = (T::c(slope), T::c(0.5));
    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
        let z = xv * k + half;
        *gv = if z > T::zero() && z < T::one() {
            *gv * k
        } else {
            T::zero()
        };
    }
    g
}

/// Max pooling with `ceil_mode` output sizing: a last window is kept when
/// it starts inside the (left-padded) input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn out_len(&self, i: usize) -> Result<usize> {
        let padded = i + 2 * self.pad;
        if padded < self.k || self.pad * 2 > self.k {
            return Err(Error::Shape(format!("max pool cannot reduce length {i}")));
        }
        let mut o = (padded - self.k).div_ceil(self.stride) + 1;
        if (o - 1) * self.stride >= i + self.pad {
            o -= 1;
        }
        Ok(o)
    }

    /// Returns the pooled tensor and the flat input index of every maximum.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
        let (oh, ow) = (self.out_len(x.h)?, self.out_len(x.w)?);
        let mut y = Tensor::zeros(x.n, x.c, oh, ow);
        let mut arg = vec![0u32; y.data.len()];
        let mut o = 0;
        for plane in 0..x.n * x.c {
            let base = plane * x.h * x.w;
            for oy in 0..oh {
                let y0 = (oy * self.stride) as isize - self.pad as isize;
                let (ya, yb) = (
                    y0.max(0) as usize,
                    ((y0 + self.k as isize) as usize).min(x.h),
                );
                for ox in 0..ow {
                    let x0 = (ox * self.stride) as isize - self.pad as isize;
                    let (xa, xb) = (
                        x0.max(0) as usize,
                        ((x0 + self.k as isize) as usize).min(x.w),
                    );
                    let mut best = T::neg_infinity();
                    let mut at = base + ya * x.w + xa;
                    for iy in ya..yb {
                        for ix in xa..xb {
                            let i = base + iy * x.w + ix;
                            let v = x.data[i];
                            if v > best || v.is_nan() {
                                best = v;
                                at = i;
                            }
                        }
                    }
                    y.data[o] = best;
                    arg[o] = at as u32;
                    o += 1;
                }
            }
        }
        Ok((y, arg))
    }

    pub fn backward<T: Scalar>(
        &self,
        x_shape: [usize; 4],
        arg: &[u32],
        gy: &Tensor<T>,
    ) -> Tensor<T> {
        let [n, c, h, w] = x_shape;
        let mut gx = Tensor::zeros(n, c, h, w);
        for (&i, &g) in arg.iter().zip(&gy.data) {
            gx.data[i as usize] += g;
        }
        gx
    }
}

/// Mean over each channel plane: `n x c x 1 x 1`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let hw = x.h * x.w;
    let scale = T::c(1.0 / hw as f64);
    let data = x
        .data
        .chunks(hw)
        .map(|p| {
            let mut s = T::zero();
            for &v in p {
                s += v;
            }
            s * scale
        })
        .collect();
    Tensor {
        n: x.n,
        c: x.c,
        h: 1,
        w: 1,
        data,
    }
}

pub fn global_avg_pool_backward<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let scale = T::c(1.0 / (h * w) as f64);
    let mut out = broadcast(g, h, w);
    for v in &mut out.data {
        *v *= scale;
    }
    out
}

/// Repeats an `n x c x 1 x 1` tensor over an `h x w` plane.
pub fn broadcast<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    debug_assert!(x.h == 1 && x.w == 1);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for (p, &v) in out.data.chunks_mut(h * w).zip(&x.data) {
        p.fill(v);
    }
    out
}

pub fn broadcast_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let hw = g.h * g.w;
    let data = g
        .data
        .chunks(hw)
        .map(|p| {
            let mut s = T::zero();
            for &v in p {
                s += v;
            }
            s
        })
        .collect();
    Tensor {
        n: g.n,
        c: g.c,
        h: 1,
        w: 1,
        data,
    }
}

/// Source taps for half-pixel-centre bilinear resampling of one axis.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (corners not aligned).
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (ty, tx) = (taps(x.h, oh), taps(x.w, ow));
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for (src, dst) in x.data.chunks(x.h * x.w).zip(out.data.chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::c(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::c(lx);
                let top = src[y0 * x.w + x0] * (T::one() - lx) + src[y0 * x.w + x1] * lx;
                let bot = src[y1 * x.w + x0] * (T::one() - lx) + src[y1 * x.w + x1] * lx;
                dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (ty, tx) = (taps(h, g.h), taps(w, g.w));
    let mut out = Tensor::zeros(g.n, g.c, h, w);
    for (src, dst) in g.data.chunks(g.h * g.w).zip(out.data.chunks_mut(h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::c(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::c(lx);
                let v = src[oy * g.w + ox];
                let (top, bot) = (v * (T::one() - ly), v * ly);
                dst[y0 * w + x0] += top * (T::one() - lx);
                dst[y0 * w + x1] += top * lx;
                dst[y1 * w + x0] += bot * (T::one() - lx);
                dst[y1 * w + x1] += bot * lx;
            }
        }
    }
    out
}
