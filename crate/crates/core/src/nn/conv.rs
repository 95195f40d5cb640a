//! Dilated convolution and transposed convolution via im2col + gemm.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{matmul, Scalar, Tensor, Trans};
use super::Param;
use crate::error::{Error, Result};

/// Geometry shared by im2col and col2im: a `k x k` kernel with stride `s`,
/// zero padding `p` and dilation `d` sliding over a `c x ih x iw` image,
/// giving an `oh x ow` output grid.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    ih: usize,
    iw: usize,
    k: usize,
    s: usize,
    p: usize,
    d: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// For each output coordinate along one axis, the input coordinate hit
    /// by kernel tap `t`, or `None` in the padding.
    #[inline]
    fn src(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        let i = (o * self.s + t * self.d) as isize - self.p as isize;
        (i >= 0 && (i as usize) < size).then_some(i as usize)
    }
}

/// `cols[(ci k + ki) k + kj][oy ow + ox] = img[ci][oy s - p + ki d][ox s - p + kj d]`.
fn im2col<T: Scalar>(img: &[T], g: &Geom, cols: &mut [T]) {
    let p_len = g.cols();
    for ci in 0..g.c {
        let plane = &img[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((ci * g.k + ki) * g.k + kj) * p_len;
                let dst = &mut cols[row..row + p_len];
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ki, g.ih) {
                        None => out.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * g.iw..(iy + 1) * g.iw];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = match g.src(ox, kj, g.iw) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `img`.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, img: &mut [T]) {
    let p_len = g.cols();
    for ci in 0..g.c {
        let plane = &mut img[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((ci * g.k + ki) * g.k + kj) * p_len;
                let src = &cols[row..row + p_len];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.ih) else {
                        continue;
                    };
                    let dst_row = &mut plane[iy * g.iw..(iy + 1) * g.iw];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        if let Some(ix) = g.src(ox, kj, g.iw) {
                            dst_row[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn kaiming<T: Scalar, R: Rng>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| T::c(normal.sample(rng))).collect()
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut y[co * plane..(co + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(gy: &[T], grad: &mut [T], plane: usize) {
    for (co, g) in grad.iter_mut().enumerate() {
        let mut s = T::zero();
        for &v in &gy[co * plane..(co + 1) * plane] {
            s += v;
        }
        *g += s;
    }
}

/// 2D convolution with dilation (atrous rate). Weight layout
/// `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-normal weights (fan-in, ReLU gain), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * k * k;
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            dilation,
            weight: Param::new(
                vec![out_c, in_c, k, k],
                kaiming(out_c * fan_in, fan_in, rng),
            ),
            bias: bias.then(|| Param::zeros(vec![out_c])),
        }
    }

    /// Size-preserving `k x k` convolution at the given dilation.
    pub fn same<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::new(
            in_c,
            out_c,
            k,
            1,
            dilation * (k - 1) / 2,
            dilation,
            bias,
            rng,
        )
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.k - 1) + 1;
        if h + 2 * self.pad < span || w + 2 * self.pad < span {
            return Err(Error::Shape(format!(
                "{h}x{w} input too small for a {}x{} kernel at dilation {}",
                self.k, self.k, self.dilation
            )));
        }
        Ok((
            (h + 2 * self.pad - span) / self.stride + 1,
            (w + 2 * self.pad - span) / self.stride + 1,
        ))
    }

    fn geom(&self, h: usize, w: usize) -> Result<Geom> {
        let (oh, ow) = self.out_hw(h, w)?;
        Ok(Geom {
            c: self.in_c,
            ih: h,
            iw: w,
            k: self.k,
            s: self.stride,
            p: self.pad,
            d: self.dilation,
            oh,
            ow,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.c != self.in_c {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_c, x.c
            )));
        }
        let g = self.geom(x.h, x.w)?;
        let (kk, p_len) = (g.rows(), g.cols());
        let mut y = Tensor::zeros(x.n, self.out_c, g.oh, g.ow);
        let mut cols = if self.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * p_len]
        };
        for b in 0..x.n {
            let src: &[T] = if self.pointwise() {
                x.item(b)
            } else {
                im2col(x.item(b), &g, &mut cols);
                &cols
            };
            let yb = y.item_mut(b);
            matmul(
                self.out_c,
                kk,
                p_len,
                &self.weight.value,
                Trans::N,
                src,
                Trans::N,
                T::zero(),
                yb,
            );
            if let Some(bias) = &self.bias {
                add_bias(yb, &bias.value, p_len);
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients for output gradient `gy` at input
    /// `x`, and returns the input gradient when `need_gx`.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        need_gx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let g = self.geom(x.h, x.w)?;
        let (kk, p_len) = (g.rows(), g.cols());
        let mut gx = need_gx.then(|| x.zeros_like());
        let pointwise = self.pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); kk * p_len]
        };
        let mut gcols = vec![T::zero(); if need_gx && !pointwise { kk * p_len } else { 0 }];
        for b in 0..x.n {
            let gyb = gy.item(b);
            let src: &[T] = if pointwise {
                x.item(b)
            } else {
                im2col(x.item(b), &g, &mut cols);
                &cols
            };
            matmul(
                self.out_c,
                p_len,
                kk,
                gyb,
                Trans::N,
                src,
                Trans::T,
                T::one(),
                &mut self.weight.grad,
            );
            if let Some(bias) = &mut self.bias {
                bias_grad(gyb, &mut bias.grad, p_len);
            }
            if let Some(gx) = gx.as_mut() {
                if pointwise {
                    matmul(
                        kk,
                        self.out_c,
                        p_len,
                        &self.weight.value,
                        Trans::T,
                        gyb,
                        Trans::N,
                        T::zero(),
                        gx.item_mut(b),
                    );
                } else {
                    matmul(
                        kk,
                        self.out_c,
                        p_len,
                        &self.weight.value,
                        Trans::T,
                        gyb,
                        Trans::N,
                        T::zero(),
                        &mut gcols,
                    );
                    col2im(&gcols, &g, gx.item_mut(b));
                }
            }
        }
        Ok(gx)
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]'s data path). Weight
/// layout `[in, out, k, k]`; output size
/// `(h - 1) s - 2 p + d (k - 1) + 1 + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // each output pixel sees about in_c * (k / stride)^2 taps
        let fan_in = (in_c * k * k / (stride * stride)).max(1);
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            output_padding,
            weight: Param::new(
                vec![in_c, out_c, k, k],
                kaiming(in_c * out_c * k * k, fan_in, rng),
            ),
            bias: bias.then(|| Param::zeros(vec![out_c])),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |i: usize| -> Result<usize> {
            let full = (i - 1) * self.stride + self.k + self.output_padding;
            full.checked_sub(2 * self.pad)
                .filter(|&o| o > 0)
                .ok_or_else(|| Error::Shape(format!("transposed conv output empty for input {i}")))
        };
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        Ok((f(h)?, f(w)?))
    }

    /// The geometry of the forward convolution this layer transposes: it
    /// maps an `oh x ow` image onto the `h x w` input grid.
    fn geom(&self, h: usize, w: usize) -> Result<Geom> {
        let (oh, ow) = self.out_hw(h, w)?;
        Ok(Geom {
            c: self.out_c,
            ih: oh,
            iw: ow,
            k: self.k,
            s: self.stride,
            p: self.pad,
            d: 1,
            oh: h,
            ow: w,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.c != self.in_c {
            return Err(Error::Shape(format!(
                "transposed conv expects {} input channels, got {}",
                self.in_c, x.c
            )));
        }
        let g = self.geom(x.h, x.w)?;
        let (kk, p_len) = (g.rows(), g.cols());
        let mut y = Tensor::zeros(x.n, self.out_c, g.ih, g.iw);
        let mut cols = vec![T::zero(); kk * p_len];
        for b in 0..x.n {
            matmul(
                kk,
                self.in_c,
                p_len,
                &self.weight.value,
                Trans::T,
                x.item(b),
                Trans::N,
                T::zero(),
                &mut cols,
            );
            let yb = y.item_mut(b);
            col2im(&cols, &g, yb);
            if let Some(bias) = &self.bias {
                add_bias(yb, &bias.value, g.ih * g.iw);
            }
        }
        Ok(y)
    }

    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        need_gx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let g = self.geom(x.h, x.w)?;
        let (kk, p_len) = (g.rows(), g.cols());
        let mut gx = need_gx.then(|| x.zeros_like());
        let mut gcols = vec![T::zero(); kk * p_len];
        for b in 0..x.n {
            let gyb = gy.item(b);
            im2col(gyb, &g, &mut gcols);
            matmul(
                self.in_c,
                p_len,
                kk,
                x.item(b),
                Trans::N,
                &gcols,
                Trans::T,
                T::one(),
                &mut self.weight.grad,
            );
            if let Some(bias) = &mut self.bias {
                bias_grad(gyb, &mut bias.grad, g.ih * g.iw);
            }
            if let Some(gx) = gx.as_mut() {
                matmul(
                    self.in_c,
                    kk,
                    p_len,
                    &self.weight.value,
                    Trans::N,
                    &gcols,
                    Trans::N,
                    T::zero(),
                    gx.item_mut(b),
                );
            }
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn output_sizes() {
        let c = Conv2d::<f32>::new(2, 4, 7, 2, 3, 1, false, &mut rng());
        assert_eq!(c.out_hw(256, 256).unwrap(), (128, 128));
        let c = Conv2d::<f32>::same(2, 4, 3, 4, false, &mut rng());
        assert_eq!(c.out_hw(17, 17).unwrap(), (17, 17));
        let t = ConvTranspose2d::<f32>::new(4, 2, 3, 2, 1, 0, false, &mut rng());
        assert_eq!(t.out_hw(17, 17).unwrap(), (33, 33));
        assert_eq!(t.out_hw(33, 33).unwrap(), (65, 65));
        let t4 = ConvTranspose2d::<f32>::new(4, 2, 3, 4, 1, 0, false, &mut rng());
        assert_eq!(t4.out_hw(17, 17).unwrap(), (65, 65));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv^T(y)> with shared weights
        let mut r = rng();
        let conv = Conv2d::<f64>::new(3, 2, 3, 2, 1, 1, false, &mut r);
        let mut tconv = ConvTranspose2d::<f64>::new(2, 3, 3, 2, 1, 0, false, &mut r);
        // conv weight [out=2, in=3, k, k] is exactly tconv's [in=2, out=3, k, k]
        tconv.weight.value = conv.weight.value.clone();
        let x = Tensor::from_vec(
            1,
            3,
            9,
            9,
            (0..243).map(|i| ((i * 37 % 17) as f64) - 8.0).collect(),
        )
        .unwrap();
        let cx = conv.forward(&x).unwrap();
        let y = Tensor::from_vec(
            1,
            2,
            cx.h,
            cx.w,
            (0..cx.data.len()).map(|i| (i % 5) as f64 - 2.0).collect(),
        )
        .unwrap();
        let ty = tconv.forward(&y).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&ty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
