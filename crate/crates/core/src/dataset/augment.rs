//! Windowing, resampling and dihedral augmentation of samples.

use serde::{Deserialize, Serialize};

use super::{to_gray, GraySample, SampleMeta, Scene};
use crate::error::{Error, Result};
use crate::geo::{ObstacleClass, Pixel};
use crate::raster::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Window side in scene pixels.
    pub window: usize,
    /// Step between TX offsets inside the window.
    pub stride: usize,
    /// Side of the emitted samples.
    pub out_size: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            window: 64,
            stride: 16,
            out_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentModes {
    /// Adds the 90/180/270 degree rotations.
    pub rotate: bool,
    /// Adds the horizontal, vertical and main-diagonal flips.
    pub flip: bool,
}

/// Source taps for one output coordinate: bilinear pair, weight of the
/// upper tap, and the nearest source index.
#[derive(Clone, Copy)]
struct Taps {
    i0: usize,
    i1: usize,
    f: f64,
    nearest: usize,
}

fn taps(out: usize, src: usize) -> Vec<Taps> {
    let scale = src as f64 / out as f64;
    (0..out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = s - i0 as f64;
            let nearest = if f >= 0.5 { i1 } else { i0 };
            Taps { i0, i1, f, nearest }
        })
        .collect()
}

/// Cuts the `w`x`w` window at `(x0, y0)` out of a scene and resamples it to
/// `out_size`. The obstacle map uses nearest neighbour (it is categorical);
/// the pathloss field is interpolated bilinearly in dBm over RoI sources only
/// and then gray-converted. The TX must lie inside the window.
pub fn window_sample(
    scene: &Scene,
    x0: usize,
    y0: usize,
    w: usize,
    out_size: usize,
    crop_index: Option<usize>,
) -> Result<GraySample> {
    let n = scene.map.size();
    if w == 0 || out_size == 0 || x0 + w > n || y0 + w > n {
        return Err(Error::InvalidArgument(format!(
            "window ({x0}, {y0}, {w}) does not fit a {n}-pixel scene"
        )));
    }
    let tx = scene.grid.tx;
    if !(x0..x0 + w).contains(&tx.x) || !(y0..y0 + w).contains(&tx.y) {
        return Err(Error::InvalidArgument(
            "window does not contain the TX".into(),
        ));
    }
    let t = taps(out_size, w);
    let mut map_ch = GrayImage::filled(out_size, out_size, 0);
    let mut target = GrayImage::filled(out_size, out_size, 0);
    let grid = &scene.grid;
    for (dy, ty) in t.iter().enumerate() {
        for (dx, tx_) in t.iter().enumerate() {
            let class = scene.map.get(Pixel::new(x0 + tx_.nearest, y0 + ty.nearest));
            map_ch.set(dx, dy, class.gray());
            if class == ObstacleClass::Building {
                continue;
            }
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (sy, wy) in [(ty.i0, 1.0 - ty.f), (ty.i1, ty.f)] {
                for (sx, wx) in [(tx_.i0, 1.0 - tx_.f), (tx_.i1, tx_.f)] {
                    let i = (y0 + sy) * n + x0 + sx;
                    let wgt = wx * wy;
                    if grid.roi_mask[i] && wgt > 0.0 {
                        acc += wgt * grid.values[i] as f64;
                        wsum += wgt;
                    }
                }
            }
            // the nearest tap is RoI and carries weight >= 1/4
            target.set(dx, dy, to_gray(acc / wsum));
        }
    }
    let scale = out_size as f64 / w as f64;
    let remap = |o: usize| (((o as f64 + 0.5) * scale).floor() as usize).min(out_size - 1);
    let (tx_out, ty_out) = (remap(tx.x - x0), remap(tx.y - y0));
    let mut tx_ch = GrayImage::filled(out_size, out_size, 0);
    tx_ch.set(tx_out, ty_out, 255);

    let crop = crop_index.map_or_else(|| "full".to_string(), |c| format!("c{c:03}"));
    Ok(GraySample {
        map_channel: map_ch,
        tx_channel: tx_ch,
        target,
        meta: SampleMeta {
            sample_id: format!("{}-{crop}", scene.scene_id),
            scene_id: scene.scene_id.clone(),
            map_id: scene.map.map_id().to_string(),
            crop_index,
            aug_tag: "id".into(),
            tx: [tx_out, ty_out],
            meters_per_pixel: scene.map.meters_per_pixel() / scale,
            generator: scene.generator,
            fc_ghz: scene.cfg.fc_ghz,
        },
    })
}

/// The whole scene as one sample of side `out_size`.
pub fn scene_sample(scene: &Scene, out_size: usize) -> Result<GraySample> {
    window_sample(scene, 0, 0, scene.map.size(), out_size, None)
}

/// All windows that contain the TX, with the TX at offsets
/// `0, stride, 2 stride, ...` inside the window along each axis. A TX away
/// from the borders yields `ceil(window / stride)^2` crops; near a border
/// fewer windows fit.
pub fn crop_augment(scene: &Scene, cfg: &CropConfig) -> Result<Vec<GraySample>> {
    let n = scene.map.size();
    if cfg.window == 0 || cfg.window > n || cfg.stride == 0 || cfg.out_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "bad crop config {cfg:?} for {n}-pixel scene"
        )));
    }
    let tx = scene.grid.tx;
    let origins = |t: usize| -> Vec<usize> {
        (0..cfg.window)
            .step_by(cfg.stride)
            .filter(|&o| o <= t && t - o + cfg.window <= n)
            .map(|o| t - o)
            .collect()
    };
    let (xs, ys) = (origins(tx.x), origins(tx.y));
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            out.push(window_sample(
                scene,
                x0,
                y0,
                cfg.window,
                cfg.out_size,
                Some(out.len()),
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
    Diag,
}

impl Op {
    fn tag(self) -> &'static str {
        match self {
            Op::Rot90 => "rot90",
            Op::Rot180 => "rot180",
            Op::Rot270 => "rot270",
            Op::HFlip => "hflip",
            Op::VFlip => "vflip",
            Op::Diag => "diag",
        }
    }

    /// Where source pixel (x, y) lands in an `n`x`n` image; rotations are
    /// clockwise in image coordinates (y down).
    fn map(self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Op::Rot90 => (m - y, x),
            Op::Rot180 => (m - x, m - y),
            Op::Rot270 => (y, m - x),
            Op::HFlip => (m - x, y),
            Op::VFlip => (x, m - y),
            Op::Diag => (y, x),
        }
    }

    fn image(self, img: &GrayImage) -> GrayImage {
        let n = img.width;
        let mut out = GrayImage::filled(n, n, 0);
        for y in 0..n {
            for x in 0..n {
                let (u, v) = self.map(x, y, n);
                out.set(u, v, img.get(x, y));
            }
        }
        out
    }

    fn sample(self, s: &GraySample) -> GraySample {
        let n = s.size();
        let (u, v) = self.map(s.meta.tx[0], s.meta.tx[1], n);
        let tag = if s.meta.aug_tag == "id" {
            self.tag().to_string()
        } else {
            format!("{}+{}", s.meta.aug_tag, self.tag())
        };
        GraySample {
            map_channel: self.image(&s.map_channel),
            tx_channel: self.image(&s.tx_channel),
            target: self.image(&s.target),
            meta: SampleMeta {
                sample_id: format!("{}-{}", s.meta.sample_id, self.tag()),
                aug_tag: tag,
                tx: [u, v],
                ..s.meta.clone()
            },
        }
    }
}

/// Each input followed by its rotations (when `rotate`) and flips (when
/// `flip`). One mode gives x4; both give x7 (identity, three rotations,
/// three flips), with no duplicate orientations.
pub fn rotate_flip_augment(samples: &[GraySample], modes: AugmentModes) -> Result<Vec<GraySample>> {
    let mut ops = Vec::new();
    if modes.rotate {
        ops.extend([Op::Rot90, Op::Rot180, Op::Rot270]);
    }
    if modes.flip {
        ops.extend([Op::HFlip, Op::VFlip, Op::Diag]);
    }
    let mut out = Vec::with_capacity(samples.len() * (1 + ops.len()));
    for s in samples {
        if s.map_channel.width != s.map_channel.height {
            return Err(Error::Shape(format!(
                "sample {} is not square",
                s.meta.sample_id
            )));
        }
        out.push(s.clone());
        out.extend(ops.iter().map(|op| op.sample(s)));
    }
    Ok(out)
}
