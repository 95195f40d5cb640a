//! Composite layers: conv + BN (+ ReLU), bottleneck residual blocks and the
//! atrous spatial pyramid.

use rand::Rng;

use crate::error::Result;
use crate::nn::{
    broadcast, broadcast_backward, child, concat, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, split_channels, BatchNorm2d, BnCache, Conv2d, ConvTranspose2d, MaxPool2d,
    Module, Param, Scalar, Tensor,
};

#[derive(Debug, Clone)]
pub(crate) enum Lin<T> {
    Conv(Conv2d<T>),
    Up(ConvTranspose2d<T>),
}

impl<T: Scalar> Lin<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Lin::Conv(c) => c.forward(x),
            Lin::Up(c) => c.forward(x),
        }
    }

    fn backward(
        &mut self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        need_gx: bool,
    ) -> Result<Option<Tensor<T>>> {
        match self {
            Lin::Conv(c) => c.backward(x, gy, need_gx),
            Lin::Up(c) => c.backward(x, gy, need_gx),
        }
    }
}

/// Linear layer, batch norm, optional ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn<T> {
    pub lin: Lin<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvBnCache<T> {
    x: Tensor<T>,
    bn: BnCache<T>,
    /// Post-ReLU output, kept for the mask.
    y: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn conv(conv: Conv2d<T>, relu: bool) -> Self {
        let bn = BatchNorm2d::new(conv.out_c);
        Self {
            lin: Lin::Conv(conv),
            bn,
            relu,
        }
    }

    pub fn up(conv: ConvTranspose2d<T>, relu: bool) -> Self {
        let bn = BatchNorm2d::new(conv.out_c);
        Self {
            lin: Lin::Up(conv),
            bn,
            relu,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        let z = self.lin.forward(x)?;
        let (mut y, bn) = self.bn.forward(&z, train)?;
        let mut kept = None;
        if self.relu {
            y = relu(y);
            kept = Some(y.clone());
        }
        Ok((
            y,
            ConvBnCache {
                x: x.clone(),
                bn,
                y: kept,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &ConvBnCache<T>,
        gy: Tensor<T>,
        need_gx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let g = match &cache.y {
            Some(y) => relu_backward(y, gy),
            None => gy,
        };
        let gz = self.bn.backward(&cache.bn, &g);
        self.lin.backward(&cache.x, &gz, need_gx)
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        match &self.lin {
            Lin::Conv(c) => c.params(&child(prefix, "conv"), out),
            Lin::Up(c) => c.params(&child(prefix, "conv"), out),
        }
        self.bn.params(&child(prefix, "bn"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        match &mut self.lin {
            Lin::Conv(c) => c.params_mut(&child(prefix, "conv"), out),
            Lin::Up(c) => c.params_mut(&child(prefix, "conv"), out),
        }
        self.bn.params_mut(&child(prefix, "bn"), out);
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.bn.buffers(&child(prefix, "bn"), out);
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.bn.buffers_mut(&child(prefix, "bn"), out);
    }
}

/// First encoder stage: strided 7x7 convolution, then max pooling.
#[derive(Debug, Clone)]
pub(crate) struct Stem<T> {
    pub conv: ConvBn<T>,
    pub pool: MaxPool2d,
}

#[derive(Debug, Clone)]
pub(crate) struct StemCache<T> {
    conv: ConvBnCache<T>,
    pre_pool: [usize; 4],
    arg: Vec<u32>,
}

impl<T: Scalar> Stem<T> {
    pub fn new<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        Self {
            conv: ConvBn::conv(Conv2d::new(in_c, out_c, 7, 2, 3, 1, false, rng), true),
            pool: MaxPool2d {
                k: 3,
                stride: 2,
                pad: 1,
            },
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, StemCache<T>)> {
        let (a, conv) = self.conv.forward(x, train)?;
        let (y, arg) = self.pool.forward(&a)?;
        Ok((
            y,
            StemCache {
                conv,
                pre_pool: a.shape(),
                arg,
            },
        ))
    }

    pub fn backward(&mut self, cache: &StemCache<T>, gy: &Tensor<T>) -> Result<()> {
        let ga = self.pool.backward(cache.pre_pool, &cache.arg, gy);
        self.conv.backward(&cache.conv, ga, false)?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Stem<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv.params(prefix, out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.params_mut(prefix, out);
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.conv.buffers(prefix, out);
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.conv.buffers_mut(prefix, out);
    }
}

/// Bottleneck residual block: 1x1 reduce (carries the stride), 3x3 at the
/// block's dilation, 1x1 expand; projection shortcut when the shape
/// changes, identity otherwise.
#[derive(Debug, Clone)]
pub(crate) struct Bottleneck<T> {
    pub reduce: ConvBn<T>,
    pub spatial: ConvBn<T>,
    pub expand: ConvBn<T>,
    pub shortcut: Option<ConvBn<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BottleneckCache<T> {
    reduce: ConvBnCache<T>,
    spatial: ConvBnCache<T>,
    expand: ConvBnCache<T>,
    shortcut: Option<ConvBnCache<T>>,
    y: Tensor<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let mid = (out_c / 4).max(1);
        Self {
            reduce: ConvBn::conv(Conv2d::new(in_c, mid, 1, stride, 0, 1, false, rng), true),
            spatial: ConvBn::conv(Conv2d::same(mid, mid, 3, dilation, false, rng), true),
            expand: ConvBn::conv(Conv2d::new(mid, out_c, 1, 1, 0, 1, false, rng), false),
            shortcut: (in_c != out_c || stride != 1).then(|| {
                ConvBn::conv(Conv2d::new(in_c, out_c, 1, stride, 0, 1, false, rng), false)
            }),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, BottleneckCache<T>)> {
        let (a, reduce) = self.reduce.forward(x, train)?;
        let (b, spatial) = self.spatial.forward(&a, train)?;
        let (mut c, expand) = self.expand.forward(&b, train)?;
        let shortcut = match &self.shortcut {
            Some(s) => {
                let (sx, cache) = s.forward(x, train)?;
                c.add_assign(&sx);
                Some(cache)
            }
            None => {
                c.add_assign(x);
                None
            }
        };
        let y = relu(c);
        Ok((
            y.clone(),
            BottleneckCache {
                reduce,
                spatial,
                expand,
                shortcut,
                y,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BottleneckCache<T>, gy: Tensor<T>) -> Result<Tensor<T>> {
        let g = relu_backward(&cache.y, gy);
        let gb = self
            .expand
            .backward(&cache.expand, g.clone(), true)?
            .expect("gx requested");
        let ga = self
            .spatial
            .backward(&cache.spatial, gb, true)?
            .expect("gx requested");
        let mut gx = self
            .reduce
            .backward(&cache.reduce, ga, true)?
            .expect("gx requested");
        match (&mut self.shortcut, &cache.shortcut) {
            (Some(s), Some(sc)) => gx.add_assign(&s.backward(sc, g, true)?.expect("gx requested")),
            _ => gx.add_assign(&g),
        }
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.reduce.params(&child(prefix, "reduce"), out);
        self.spatial.params(&child(prefix, "spatial"), out);
        self.expand.params(&child(prefix, "expand"), out);
        if let Some(s) = &self.shortcut {
            s.params(&child(prefix, "shortcut"), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.reduce.params_mut(&child(prefix, "reduce"), out);
        self.spatial.params_mut(&child(prefix, "spatial"), out);
        self.expand.params_mut(&child(prefix, "expand"), out);
        if let Some(s) = &mut self.shortcut {
            s.params_mut(&child(prefix, "shortcut"), out);
        }
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.reduce.buffers(&child(prefix, "reduce"), out);
        self.spatial.buffers(&child(prefix, "spatial"), out);
        self.expand.buffers(&child(prefix, "expand"), out);
        if let Some(s) = &self.shortcut {
            s.buffers(&child(prefix, "shortcut"), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.reduce.buffers_mut(&child(prefix, "reduce"), out);
        self.spatial.buffers_mut(&child(prefix, "spatial"), out);
        self.expand.buffers_mut(&child(prefix, "expand"), out);
        if let Some(s) = &mut self.shortcut {
            s.buffers_mut(&child(prefix, "shortcut"), out);
        }
    }
}

/// A stack of bottleneck blocks; the first carries the stride, block `i`
/// uses dilation `dilations[i % len]`.
#[derive(Debug, Clone)]
pub(crate) struct ResLayer<T> {
    pub blocks: Vec<Bottleneck<T>>,
}

impl<T: Scalar> ResLayer<T> {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        n_blocks: usize,
        stride: usize,
        dilations: &[usize],
        rng: &mut R,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| {
                let (cin, s) = if i == 0 { (in_c, stride) } else { (out_c, 1) };
                Bottleneck::new(cin, out_c, s, dilations[i % dilations.len()], rng)
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        train: bool,
    ) -> Result<(Tensor<T>, Vec<BottleneckCache<T>>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(&h, train)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&mut self, caches: &[BottleneckCache<T>], gy: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = gy;
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            g = b.backward(c, g)?;
        }
        Ok(g)
    }
}

impl<T: Scalar> Module<T> for ResLayer<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&child(prefix, &i.to_string()), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&child(prefix, &i.to_string()), out);
        }
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.buffers(&child(prefix, &i.to_string()), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.buffers_mut(&child(prefix, &i.to_string()), out);
        }
    }
}

/// Atrous spatial pyramid: a 1x1 branch, one 3x3 branch per rate and an
/// image-level branch (global average pool, 1x1 conv, broadcast), fused by
/// a 1x1 projection.
#[derive(Debug, Clone)]
pub(crate) struct Aspp<T> {
    pub point: ConvBn<T>,
    pub rates: Vec<ConvBn<T>>,
    /// Image-pool branch; has a bias and no batch norm (its statistics
    /// would come from a single value per item).
    pub pool: Conv2d<T>,
    pub project: ConvBn<T>,
    pub branch_c: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct AsppCache<T> {
    point: ConvBnCache<T>,
    rates: Vec<ConvBnCache<T>>,
    gap: Tensor<T>,
    pool_out: Tensor<T>,
    project: ConvBnCache<T>,
    hw: (usize, usize),
}

impl<T: Scalar> Aspp<T> {
    pub fn new<R: Rng>(
        in_c: usize,
        branch_c: usize,
        out_c: usize,
        rates: &[usize],
        rng: &mut R,
    ) -> Self {
        let point = ConvBn::conv(Conv2d::new(in_c, branch_c, 1, 1, 0, 1, false, rng), true);
        let rates = rates
            .iter()
            .map(|&r| ConvBn::conv(Conv2d::same(in_c, branch_c, 3, r, false, rng), true))
            .collect::<Vec<_>>();
        let pool = Conv2d::new(in_c, branch_c, 1, 1, 0, 1, true, rng);
        let total = branch_c * (rates.len() + 2);
        let project = ConvBn::conv(Conv2d::new(total, out_c, 1, 1, 0, 1, false, rng), true);
        Self {
            point,
            rates,
            pool,
            project,
            branch_c,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, AsppCache<T>)> {
        let (p, point) = self.point.forward(x, train)?;
        let mut outs = vec![p];
        let mut rates = Vec::with_capacity(self.rates.len());
        for r in &self.rates {
            let (y, c) = r.forward(x, train)?;
            outs.push(y);
            rates.push(c);
        }
        let gap = global_avg_pool(x);
        let pool_out = relu(self.pool.forward(&gap)?);
        outs.push(broadcast(&pool_out, x.h, x.w));
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let cat = concat(&refs);
        let (y, project) = self.project.forward(&cat, train)?;
        Ok((
            y,
            AsppCache {
                point,
                rates,
                gap,
                pool_out,
                project,
                hw: (x.h, x.w),
            },
        ))
    }

    pub fn backward(&mut self, cache: &AsppCache<T>, gy: Tensor<T>) -> Result<Tensor<T>> {
        let gcat = self
            .project
            .backward(&cache.project, gy, true)?
            .expect("gx requested");
        let parts = split_channels(&gcat, &vec![self.branch_c; self.rates.len() + 2]);
        let mut parts = parts.into_iter();
        let mut gx = self
            .point
            .backward(&cache.point, parts.next().expect("branch"), true)?
            .expect("gx requested");
        for (r, c) in self.rates.iter_mut().zip(&cache.rates) {
            gx.add_assign(
                &r.backward(c, parts.next().expect("branch"), true)?
                    .expect("gx requested"),
            );
        }
        let gpool = relu_backward(
            &cache.pool_out,
            broadcast_backward(&parts.next().expect("branch")),
        );
        let ggap = self
            .pool
            .backward(&cache.gap, &gpool, true)?
            .expect("gx requested");
        gx.add_assign(&global_avg_pool_backward(&ggap, cache.hw.0, cache.hw.1));
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for Aspp<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.point.params(&child(prefix, "point"), out);
        for (i, r) in self.rates.iter().enumerate() {
            r.params(&child(prefix, &format!("rate{i}")), out);
        }
        self.pool.params(&child(prefix, "pool"), out);
        self.project.params(&child(prefix, "project"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.point.params_mut(&child(prefix, "point"), out);
        for (i, r) in self.rates.iter_mut().enumerate() {
            r.params_mut(&child(prefix, &format!("rate{i}")), out);
        }
        self.pool.params_mut(&child(prefix, "pool"), out);
        self.project.params_mut(&child(prefix, "project"), out);
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.point.buffers(&child(prefix, "point"), out);
        for (i, r) in self.rates.iter().enumerate() {
            r.buffers(&child(prefix, &format!("rate{i}")), out);
        }
        self.project.buffers(&child(prefix, "project"), out);
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.point.buffers_mut(&child(prefix, "point"), out);
        for (i, r) in self.rates.iter_mut().enumerate() {
            r.buffers_mut(&child(prefix, &format!("rate{i}")), out);
        }
        self.project.buffers_mut(&child(prefix, "project"), out);
    }
}
