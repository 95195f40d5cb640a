//! A small CPU tensor engine: just the layers PMNet needs, each with a
//! hand-written backward pass.
//!
//! Layers take `&self` in `forward` and `&mut self` in `backward`, which
//! accumulates into [`Param::grad`]. Callers keep whatever activations the
//! backward pass needs.

mod conv;
mod norm;
mod ops;
mod tensor;

pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::{BatchNorm2d, BnCache};
pub use ops::{
    broadcast, broadcast_backward, global_avg_pool, global_avg_pool_backward, hardsigmoid,
    hardsigmoid_backward, relu, relu_backward, upsample_bilinear, upsample_bilinear_backward,
    MaxPool2d,
};
pub use tensor::{concat, split_channels, Scalar, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![T::zero(); len])
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named access to trainable parameters and non-trainable buffers.
///
/// Names are dotted paths (`e2.0.conv1.weight`); checkpoints and optimizers
/// rely on the visiting order being stable.
pub trait Module<T: Scalar> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);
    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a Vec<T>)>) {}
    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<(String, &'a mut Vec<T>)>) {}
}

/// Joins a prefix and a field name.
pub fn child(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! conv_module {
    ($ty:ident) => {
        impl<T: Scalar> Module<T> for $ty<T> {
            fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
                out.push((child(prefix, "weight"), &self.weight));
                if let Some(b) = &self.bias {
                    out.push((child(prefix, "bias"), b));
                }
            }
            fn params_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut Param<T>)>,
            ) {
                out.push((child(prefix, "weight"), &mut self.weight));
                if let Some(b) = &mut self.bias {
                    out.push((child(prefix, "bias"), b));
                }
            }
        }
    };
}
conv_module!(Conv2d);
conv_module!(ConvTranspose2d);

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((child(prefix, "gamma"), &self.gamma));
        out.push((child(prefix, "beta"), &self.beta));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((child(prefix, "gamma"), &mut self.gamma));
        out.push((child(prefix, "beta"), &mut self.beta));
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((child(prefix, "running_mean"), &self.running_mean));
        out.push((child(prefix, "running_var"), &self.running_var));
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((child(prefix, "running_mean"), &mut self.running_mean));
        out.push((child(prefix, "running_var"), &mut self.running_var));
    }
}

/// Convolution with an arbitrary atrous rate: weight `w` is
/// `[out, in, k, k]` (k odd), and
/// `g[o][i][j] = sum_c sum_m sum_n f[c][i s - p + r m][j s - p + r n] w[o][c][m][n]`.
pub fn atrous_conv2d<T: Scalar>(
    f: &Tensor<T>,
    w: &[T],
    w_shape: [usize; 4],
    rate: usize,
    stride: usize,
    pad: usize,
) -> crate::Result<Tensor<T>> {
    let [out_c, in_c, k, k2] = w_shape;
    if rate == 0 || stride == 0 || k != k2 || k % 2 == 0 {
        return Err(crate::Error::Domain(format!(
            "atrous conv needs rate >= 1, stride >= 1 and an odd square kernel, got rate {rate}, stride {stride}, {k}x{k2}"
        )));
    }
    if w.len() != out_c * in_c * k * k || f.c != in_c {
        return Err(crate::Error::Domain(format!(
            "kernel {out_c}x{in_c}x{k}x{k} ({} values) does not fit a {}-channel input",
            w.len(),
            f.c
        )));
    }
    let conv = Conv2d {
        in_c,
        out_c,
        k,
        stride,
        pad,
        dilation: rate,
        weight: Param::new(w_shape.to_vec(), w.to_vec()),
        bias: None,
    };
    conv.forward(f)
}
