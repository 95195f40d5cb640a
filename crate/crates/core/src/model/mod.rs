//! PMNet: a residual encoder with an atrous pyramid and a decoder with
//! skip connections.
//!
//! Wiring, with `c = base_width` and `N = input_size`:
//!
//! | stage | operation | output |
//! |---|---|---|
//! | E1 | 7x7/2 conv, BN, ReLU, 3x3/2 max pool (ceil) | c x (N/4+1) |
//! | E2 | bottleneck layer, stride 1 | 4c x (N/4+1) |
//! | E3 | bottleneck layer, stride 2 (4 at output stride 16) | 8c |
//! | E4 | bottleneck layer, stride 2 | 8c |
//! | E5 | bottleneck layer, multi-grid dilations | 16c |
//! | E6 | atrous pyramid (1x1, 3x3 per rate, image pool), 1x1 fuse | 8c |
//! | D6 | 3x3 conv on E6, concat E4 | 8c + 8c |
//! | D5 | 3x3 transposed conv up to E3, concat E3 | 8c + 8c |
//! | D4 | 3x3 transposed conv up to E2, concat E2 | 4c + 4c |
//! | D3 | 3x3 conv, concat E2 | 4c + 4c |
//! | D2 | 3x3 conv, concat E1 | 4c + c |
//! | D1 | 3x3 conv, bilinear up to N, concat input | 2c + 2 |
//! | head | 1x1 conv, BN, ReLU, 1x1 conv, unit-slope hard sigmoid | 1 x N |
//!
//! Every decoder conv is followed by BN and ReLU. The head is pointwise:
//! at full resolution the concatenated input already carries the building
//! mask, and a 3x3 head there would dominate the cost of a step.

mod blocks;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    child, concat, hardsigmoid, hardsigmoid_backward, split_channels, upsample_bilinear,
    upsample_bilinear_backward, Conv2d, ConvTranspose2d, Module, Param, Scalar, Tensor,
};
use blocks::{Aspp, AsppCache, BottleneckCache, ConvBn, ConvBnCache, ResLayer, Stem, StemCache};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

/// Slope of the saturating output: `clamp(x + 1/2, 0, 1)`.
const OUTPUT_SLOPE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmnetConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    pub input_size: usize,
    /// 8 or 16.
    pub output_stride: usize,
    /// Dilations of the pyramid's 3x3 branches.
    pub atrous_rates: Vec<usize>,
    /// Dilation multipliers cycled through the E5 blocks.
    pub multi_grid: Vec<usize>,
    /// Bottleneck blocks in E2..E5.
    pub reslayer_block_counts: [usize; 4],
    pub base_width: usize,
    /// Initialisation seed.
    pub seed: u64,
}

impl Default for PmnetConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            output_channels: 1,
            input_size: 256,
            output_stride: 8,
            atrous_rates: vec![1, 2, 4],
            multi_grid: vec![1, 2, 4],
            reslayer_block_counts: [3, 4, 6, 3],
            base_width: 64,
            seed: 0,
        }
    }
}

impl PmnetConfig {
    /// The full-size network.
    pub fn full() -> Self {
        Self::default()
    }

    /// Small network on 128x128 inputs for CPU runs and CI.
    pub fn desk() -> Self {
        Self {
            input_size: 128,
            reslayer_block_counts: [1, 1, 1, 1],
            base_width: 16,
            ..Self::default()
        }
    }

    fn strides(&self) -> (usize, usize) {
        if self.output_stride == 16 {
            (4, 2)
        } else {
            (2, 2)
        }
    }

    /// The stage shapes this configuration produces, without building it.
    pub fn expected_shapes(&self) -> Vec<StageShape> {
        let c = self.base_width;
        let (s3, s4) = self.strides();
        let n = self.input_size;
        let conv = n.saturating_sub(1) / 2 + 1;
        let r1 = crate::nn::MaxPool2d {
            k: 3,
            stride: 2,
            pad: 1,
        }
        .out_len(conv)
        .unwrap_or(0);
        let r3 = r1.saturating_sub(1) / s3 + 1;
        let r4 = r3.saturating_sub(1) / s4 + 1;
        let st = |name: &str, channels: Vec<usize>, size: usize| StageShape {
            name: name.to_string(),
            channels,
            size,
        };
        vec![
            st("E1", vec![c], r1),
            st("E2", vec![4 * c], r1),
            st("E3", vec![8 * c], r3),
            st("E4", vec![8 * c], r4),
            st("E5", vec![16 * c], r4),
            st("E6", vec![8 * c], r4),
            st("D6", vec![8 * c, 8 * c], r4),
            st("D5", vec![8 * c, 8 * c], r3),
            st("D4", vec![4 * c, 4 * c], r1),
            st("D3", vec![4 * c, 4 * c], r1),
            st("D2", vec![4 * c, c], r1),
            st("D1", vec![2 * c, self.input_channels], n),
            st("out", vec![self.output_channels], n),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let report = || {
            self.expected_shapes()
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        if self.output_stride != 8 && self.output_stride != 16 {
            return Err(Error::InvalidArgument(format!(
                "output_stride must be 8 or 16, got {}",
                self.output_stride
            )));
        }
        let unit = if self.output_stride == 16 { 32 } else { 16 };
        if self.input_size < 2 * unit || self.input_size % unit != 0 {
            return Err(Error::Shape(format!(
                "input_size {} must be a multiple of {unit} and at least {} at output stride {}, \
                 otherwise decoder upsampling cannot meet the skip resolutions (would be: {})",
                self.input_size,
                2 * unit,
                self.output_stride,
                report()
            )));
        }
        if self.input_channels == 0 || self.output_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        if self.reslayer_block_counts.contains(&0) {
            return Err(Error::InvalidArgument(
                "every residual layer needs at least one block".into(),
            ));
        }
        if self.atrous_rates.is_empty() || self.atrous_rates.contains(&0) {
            return Err(Error::InvalidArgument(
                "atrous_rates must be non-empty and >= 1".into(),
            ));
        }
        if self.multi_grid.is_empty() || self.multi_grid.contains(&0) {
            return Err(Error::InvalidArgument(
                "multi_grid must be non-empty and >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Same topology (everything but the seed).
    pub fn compatible_with(&self, other: &Self) -> bool {
        Self {
            seed: 0,
            ..self.clone()
        } == Self {
            seed: 0,
            ..other.clone()
        }
    }
}

/// Output of one stage: channel blocks (several when skips are
/// concatenated) at `size x size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub name: String,
    pub channels: Vec<usize>,
    pub size: usize,
}

impl StageShape {
    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }
}

impl std::fmt::Display for StageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ch = self
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("+");
        if self.channels.len() > 1 {
            write!(f, "{} ({ch})x{}x{}", self.name, self.size, self.size)
        } else {
            write!(f, "{} {ch}x{}x{}", self.name, self.size, self.size)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pmnet<T> {
    cfg: PmnetConfig,
    e1: Stem<T>,
    e2: ResLayer<T>,
    e3: ResLayer<T>,
    e4: ResLayer<T>,
    e5: ResLayer<T>,
    e6: Aspp<T>,
    d6: ConvBn<T>,
    d5: ConvBn<T>,
    d4: ConvBn<T>,
    d3: ConvBn<T>,
    d2: ConvBn<T>,
    d1: ConvBn<T>,
    head: ConvBn<T>,
    out: Conv2d<T>,
}

/// Activations kept by [`Pmnet::forward`] for the backward pass, plus the
/// stage shape trace.
#[derive(Debug, Clone)]
pub struct PmnetCache<T> {
    e1: StemCache<T>,
    e2: Vec<BottleneckCache<T>>,
    e3: Vec<BottleneckCache<T>>,
    e4: Vec<BottleneckCache<T>>,
    e5: Vec<BottleneckCache<T>>,
    e6: AsppCache<T>,
    d6: ConvBnCache<T>,
    d5: ConvBnCache<T>,
    d4: ConvBnCache<T>,
    d3: ConvBnCache<T>,
    d2: ConvBnCache<T>,
    d1: ConvBnCache<T>,
    d1_hw: (usize, usize),
    head: ConvBnCache<T>,
    head_out: Tensor<T>,
    logits: Tensor<T>,
    pub trace: Vec<StageShape>,
}

fn shape_of<T: Scalar>(name: &str, parts: &[&Tensor<T>]) -> StageShape {
    StageShape {
        name: name.to_string(),
        channels: parts.iter().map(|t| t.c).collect(),
        size: parts[0].h,
    }
}

impl<T: Scalar> Pmnet<T> {
    pub fn new(cfg: &PmnetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = &mut rng;
        let c = cfg.base_width;
        let (s3, s4) = cfg.strides();
        let [b2, b3, b4, b5] = cfg.reslayer_block_counts;
        let e1 = Stem::new(cfg.input_channels, c, r);
        let e2 = ResLayer::new(c, 4 * c, b2, 1, &[1], r);
        let e3 = ResLayer::new(4 * c, 8 * c, b3, s3, &[1], r);
        let e4 = ResLayer::new(8 * c, 8 * c, b4, s4, &[1], r);
        let e5 = ResLayer::new(8 * c, 16 * c, b5, 1, &cfg.multi_grid, r);
        let e6 = Aspp::new(16 * c, 4 * c, 8 * c, &cfg.atrous_rates, r);
        let d6 = ConvBn::conv(Conv2d::same(8 * c, 8 * c, 3, 1, false, r), true);
        let d5 = ConvBn::up(
            ConvTranspose2d::new(16 * c, 8 * c, 3, s4, 1, 0, false, r),
            true,
        );
        let d4 = ConvBn::up(
            ConvTranspose2d::new(16 * c, 4 * c, 3, s3, 1, 0, false, r),
            true,
        );
        let d3 = ConvBn::conv(Conv2d::same(8 * c, 4 * c, 3, 1, false, r), true);
        let d2 = ConvBn::conv(Conv2d::same(8 * c, 4 * c, 3, 1, false, r), true);
        let d1 = ConvBn::conv(Conv2d::same(5 * c, 2 * c, 3, 1, false, r), true);
        let head = ConvBn::conv(
            Conv2d::new(2 * c + cfg.input_channels, c, 1, 1, 0, 1, false, r),
            true,
        );
        let mut out = Conv2d::new(c, cfg.output_channels, 1, 1, 0, 1, true, r);
        // start near the middle of the output range
        for w in &mut out.weight.value {
            *w *= T::c(0.1);
        }
        Ok(Self {
            cfg: cfg.clone(),
            e1,
            e2,
            e3,
            e4,
            e5,
            e6,
            d6,
            d5,
            d4,
            d3,
            d2,
            d1,
            head,
            out,
        })
    }

    pub fn config(&self) -> &PmnetConfig {
        &self.cfg
    }

    /// Runs the network. `train` selects batch statistics in the norm
    /// layers; the returned cache feeds [`Pmnet::backward`].
    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, PmnetCache<T>)> {
        let n = self.cfg.input_size;
        if x.c != self.cfg.input_channels || x.h != n || x.w != n || x.n == 0 {
            return Err(Error::Shape(format!(
                "expected input Bx{}x{n}x{n}, got {}x{}x{}x{}",
                self.cfg.input_channels, x.n, x.c, x.h, x.w
            )));
        }
        let mut trace = Vec::with_capacity(13);
        let (e1, c_e1) = self.e1.forward(x, train)?;
        trace.push(shape_of("E1", &[&e1]));
        let (e2, c_e2) = self.e2.forward(&e1, train)?;
        trace.push(shape_of("E2", &[&e2]));
        let (e3, c_e3) = self.e3.forward(&e2, train)?;
        trace.push(shape_of("E3", &[&e3]));
        let (e4, c_e4) = self.e4.forward(&e3, train)?;
        trace.push(shape_of("E4", &[&e4]));
        let (e5, c_e5) = self.e5.forward(&e4, train)?;
        trace.push(shape_of("E5", &[&e5]));
        let (e6, c_e6) = self.e6.forward(&e5, train)?;
        trace.push(shape_of("E6", &[&e6]));

        let (a, c_d6) = self.d6.forward(&e6, train)?;
        trace.push(shape_of("D6", &[&a, &e4]));
        let d6 = concat(&[&a, &e4]);
        let (a, c_d5) = self.d5.forward(&d6, train)?;
        trace.push(shape_of("D5", &[&a, &e3]));
        let d5 = concat(&[&a, &e3]);
        let (a, c_d4) = self.d4.forward(&d5, train)?;
        trace.push(shape_of("D4", &[&a, &e2]));
        let d4 = concat(&[&a, &e2]);
        let (a, c_d3) = self.d3.forward(&d4, train)?;
        trace.push(shape_of("D3", &[&a, &e2]));
        let d3 = concat(&[&a, &e2]);
        let (a, c_d2) = self.d2.forward(&d3, train)?;
        trace.push(shape_of("D2", &[&a, &e1]));
        let d2 = concat(&[&a, &e1]);
        let (a, c_d1) = self.d1.forward(&d2, train)?;
        let d1_hw = (a.h, a.w);
        let up = upsample_bilinear(&a, n, n);
        trace.push(shape_of("D1", &[&up, x]));
        let d1 = concat(&[&up, x]);

        let (h, c_head) = self.head.forward(&d1, train)?;
        let logits = self.out.forward(&h)?;
        let y = hardsigmoid(&logits, OUTPUT_SLOPE);
        trace.push(shape_of("out", &[&y]));
        Ok((
            y,
            PmnetCache {
                e1: c_e1,
                e2: c_e2,
                e3: c_e3,
                e4: c_e4,
                e5: c_e5,
                e6: c_e6,
                d6: c_d6,
                d5: c_d5,
                d4: c_d4,
                d3: c_d3,
                d2: c_d2,
                d1: c_d1,
                d1_hw,
                head: c_head,
                head_out: h,
                logits,
                trace,
            },
        ))
    }

    /// Inference-mode forward.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, false)?.0)
    }

    /// Accumulates parameter gradients for output gradient `gy`. In
    /// training mode this also advances the norm layers' running
    /// statistics.
    pub fn backward(&mut self, cache: &PmnetCache<T>, gy: &Tensor<T>) -> Result<()> {
        let c = self.cfg.base_width;
        let gl = hardsigmoid_backward(&cache.logits, gy.clone(), OUTPUT_SLOPE);
        let gh = self
            .out
            .backward(&cache.head_out, &gl, true)?
            .expect("gx requested");
        let gd1 = self
            .head
            .backward(&cache.head, gh, true)?
            .expect("gx requested");

        let mut it = split_channels(&gd1, &[2 * c, self.cfg.input_channels]).into_iter();
        let gup = it.next().expect("part");
        let ga = upsample_bilinear_backward(&gup, cache.d1_hw.0, cache.d1_hw.1);
        let gd2 = self
            .d1
            .backward(&cache.d1, ga, true)?
            .expect("gx requested");

        let [ga, mut ge1] = two(split_channels(&gd2, &[4 * c, c]));
        let gd3 = self
            .d2
            .backward(&cache.d2, ga, true)?
            .expect("gx requested");
        let [ga, mut ge2] = two(split_channels(&gd3, &[4 * c, 4 * c]));
        let gd4 = self
            .d3
            .backward(&cache.d3, ga, true)?
            .expect("gx requested");
        let [ga, ge2b] = two(split_channels(&gd4, &[4 * c, 4 * c]));
        ge2.add_assign(&ge2b);
        let gd5 = self
            .d4
            .backward(&cache.d4, ga, true)?
            .expect("gx requested");
        let [ga, mut ge3] = two(split_channels(&gd5, &[8 * c, 8 * c]));
        let gd6 = self
            .d5
            .backward(&cache.d5, ga, true)?
            .expect("gx requested");
        let [ga, mut ge4] = two(split_channels(&gd6, &[8 * c, 8 * c]));
        let ge6 = self
            .d6
            .backward(&cache.d6, ga, true)?
            .expect("gx requested");

        let ge5 = self.e6.backward(&cache.e6, ge6)?;
        ge4.add_assign(&self.e5.backward(&cache.e5, ge5)?);
        ge3.add_assign(&self.e4.backward(&cache.e4, ge4)?);
        ge2.add_assign(&self.e3.backward(&cache.e3, ge3)?);
        ge1.add_assign(&self.e2.backward(&cache.e2, ge2)?);
        self.e1.backward(&cache.e1, &ge1)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = Vec::new();
        self.params("", &mut v);
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = Vec::new();
        self.params_mut("", &mut v);
        v
    }

    pub fn named_buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut v = Vec::new();
        self.buffers("", &mut v);
        v
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut v = Vec::new();
        self.buffers_mut("", &mut v);
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Pmnet<U>> {
        let mut out = Pmnet::<U>::new(&self.cfg)?;
        let conv = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect()
        };
        for ((_, dst), (_, src)) in out.named_params_mut().into_iter().zip(self.named_params()) {
            dst.value = conv(&src.value);
        }
        for ((_, dst), (_, src)) in out
            .named_buffers_mut()
            .into_iter()
            .zip(self.named_buffers())
        {
            *dst = conv(src);
        }
        Ok(out)
    }
}

fn two<T>(v: Vec<T>) -> [T; 2] {
    let mut it = v.into_iter();
    [it.next().expect("two parts"), it.next().expect("two parts")]
}

macro_rules! visit_fields {
    ($self:ident, $method:ident, $prefix:ident, $out:ident, [$($f:ident),*]) => {
        $( $self.$f.$method(&child($prefix, stringify!($f)), $out); )*
    };
}

impl<T: Scalar> Module<T> for Pmnet<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        visit_fields!(
            self,
            params,
            prefix,
            out,
            [e1, e2, e3, e4, e5, e6, d6, d5, d4, d3, d2, d1, head, out]
        );
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        visit_fields!(
            self,
            params_mut,
            prefix,
            out,
            [e1, e2, e3, e4, e5, e6, d6, d5, d4, d3, d2, d1, head, out]
        );
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        visit_fields!(
            self,
            buffers,
            prefix,
            out,
            [e1, e2, e3, e4, e5, e6, d6, d5, d4, d3, d2, d1, head]
        );
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        visit_fields!(
            self,
            buffers_mut,
            prefix,
            out,
            [e1, e2, e3, e4, e5, e6, d6, d5, d4, d3, d2, d1, head]
        );
    }
}

/// Builds the network for `cfg`.
pub fn build_pmnet(cfg: &PmnetConfig) -> Result<Pmnet<f32>> {
    Pmnet::new(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PmnetConfig {
        PmnetConfig {
            input_size: 32,
            base_width: 4,
            reslayer_block_counts: [1, 1, 2, 1],
            ..PmnetConfig::default()
        }
    }

    #[test]
    fn trace_matches_expected_shapes() {
        for os in [8, 16] {
            let cfg = PmnetConfig {
                output_stride: os,
                input_size: 64,
                ..tiny()
            };
            let m = Pmnet::<f32>::new(&cfg).unwrap();
            let x = Tensor::zeros(2, 2, 64, 64);
            let (y, cache) = m.forward(&x, true).unwrap();
            assert_eq!(y.shape(), [2, 1, 64, 64]);
            assert_eq!(cache.trace, cfg.expected_shapes());
        }
    }

    #[test]
    fn rejects_unreachable_sizes() {
        let err = Pmnet::<f32>::new(&PmnetConfig {
            input_size: 40,
            ..tiny()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("E1"));
        assert!(Pmnet::<f32>::new(&PmnetConfig {
            output_stride: 4,
            ..tiny()
        })
        .is_err());
    }

    #[test]
    fn names_are_unique_and_stable() {
        let m = Pmnet::<f32>::new(&tiny()).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names[0], "e1.conv.weight");
        assert!(names.contains(&"e5.0.spatial.conv.weight".to_string()));
        assert_eq!(names.last().unwrap(), "out.bias");
        assert_eq!(
            Pmnet::<f32>::new(&tiny()).unwrap().num_params(),
            m.num_params()
        );
    }
}
