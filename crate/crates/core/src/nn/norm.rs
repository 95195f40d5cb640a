use super::tensor::{Scalar, Tensor};
use super::Param;
use crate::error::{Error, Result};

/// Per-channel batch normalisation.
///
/// In training mode the batch statistics normalise the input; the running
/// estimates are folded in by [`BatchNorm2d::backward`], i.e. once per
/// optimisation step. Evaluation uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

fn plane_sum<T: Scalar>(p: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut s = T::zero();
    for &v in p {
        s += f(v);
    }
    s.to_f64().unwrap_or(f64::NAN)
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    train: bool,
    mean: Vec<T>,
    var: Vec<T>,
    inv_std: Vec<T>,
    /// Normalised input.
    xhat: Tensor<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, BnCache<T>)> {
        if x.c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels, x.c
            )));
        }
        let hw = x.h * x.w;
        let count = x.n * hw;
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); x.c];
            let mut var = vec![T::zero(); x.c];
            for ch in 0..x.c {
                // per-plane partial sums in T, combined in f64
                let mut s = 0.0f64;
                for b in 0..x.n {
                    s += plane_sum(&x.item(b)[ch * hw..(ch + 1) * hw], |v| v);
                }
                let m = s / count as f64;
                let mt = T::c(m);
                let mut q = 0.0f64;
                for b in 0..x.n {
                    q += plane_sum(&x.item(b)[ch * hw..(ch + 1) * hw], |v| (v - mt) * (v - mt));
                }
                mean[ch] = mt;
                var[ch] = T::c(q / count as f64);
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let eps = T::c(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.zeros_like();
        let mut y = x.zeros_like();
        for b in 0..x.n {
            let (xi, hi) = (x.item(b), xhat.item_mut(b));
            for ch in 0..x.c {
                let (m, s) = (mean[ch], inv_std[ch]);
                for (o, &v) in hi[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .zip(&xi[ch * hw..(ch + 1) * hw])
                {
                    *o = (v - m) * s;
                }
            }
            let yi = y.item_mut(b);
            for ch in 0..x.c {
                let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
                for (o, &h) in yi[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .zip(&hi[ch * hw..(ch + 1) * hw])
                {
                    *o = g * h + be;
                }
            }
        }
        Ok((
            y,
            BnCache {
                train,
                mean,
                var,
                inv_std,
                xhat,
            },
        ))
    }

    /// Accumulates gamma/beta gradients, returns the input gradient, and in
    /// training mode updates the running statistics.
    pub fn backward(&mut self, cache: &BnCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let x = &cache.xhat;
        let hw = x.h * x.w;
        let count = (x.n * hw) as f64;
        let mut sum_g = vec![0.0f64; x.c];
        let mut sum_gx = vec![0.0f64; x.c];
        for b in 0..x.n {
            let (gi, hi) = (gy.item(b), x.item(b));
            for ch in 0..x.c {
                let r = ch * hw..(ch + 1) * hw;
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for (&g, &h) in gi[r.clone()].iter().zip(&hi[r]) {
                    sg += g;
                    sgx += g * h;
                }
                sum_g[ch] += sg.to_f64().unwrap_or(f64::NAN);
                sum_gx[ch] += sgx.to_f64().unwrap_or(f64::NAN);
            }
        }
        for ch in 0..x.c {
            self.beta.grad[ch] += T::c(sum_g[ch]);
            self.gamma.grad[ch] += T::c(sum_gx[ch]);
        }

        let mut gx = x.zeros_like();
        for b in 0..x.n {
            let (gi, hi) = (gy.item(b), x.item(b));
            let out = gx.item_mut(b);
            for ch in 0..x.c {
                let k = self.gamma.value[ch] * cache.inv_std[ch];
                let r = ch * hw..(ch + 1) * hw;
                if cache.train {
                    let mg = T::c(sum_g[ch] / count);
                    let mgx = T::c(sum_gx[ch] / count);
                    for ((o, &g), &h) in out[r.clone()].iter_mut().zip(&gi[r.clone()]).zip(&hi[r]) {
                        *o = k * (g - mg - h * mgx);
                    }
                } else {
                    for (o, &g) in out[r.clone()].iter_mut().zip(&gi[r]) {
                        *o = k * g;
                    }
                }
            }
        }

        if cache.train {
            let m = T::c(self.momentum);
            let unbias = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            for ch in 0..x.c {
                self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * cache.mean[ch];
                self.running_var[ch] =
                    (T::one() - m) * self.running_var[ch] + m * cache.var[ch] * T::c(unbias);
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalises_each_channel() {
        let bn = BatchNorm2d::<f64>::new(2);
        let x =
            Tensor::from_vec(2, 2, 1, 2, vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 30.0]).unwrap();
        let (y, _) = bn.forward(&x, true).unwrap();
        // channel 0 holds 1, 3, 5, 7
        let c0 = [y.data[0], y.data[1], y.data[4], y.data[5]];
        let mean: f64 = c0.iter().sum::<f64>() / 4.0;
        let var: f64 = c0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 5.0 / (5.0 + 1e-5)).abs() < 1e-9);
    }

    #[test]
    fn running_stats_follow_momentum_and_unbiased_variance() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = bn.forward(&x, true).unwrap();
        bn.backward(&cache, &y.zeros_like());
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        // evaluation mode leaves the statistics alone
        let (_, cache) = bn.forward(&x, false).unwrap();
        bn.backward(&cache, &y.zeros_like());
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
    }
}
