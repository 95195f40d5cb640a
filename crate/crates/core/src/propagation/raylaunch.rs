//! 2D ray launcher: rays leave the TX uniformly in angle, travel through the
//! grid with an Amanatides-Woo traversal, reflect specularly off BUILDING
//! faces and deposit free-space power on the RoI cells they pass.
//!
//! A single ray stands for the wedge of angular width `dtheta`, so at
//! unfolded distance `d` neighbouring rays are `s = dtheta * d` pixels apart.
//! Each ray spreads its power over a triangular (hat) footprint of half-width
//! `h = max(rx_capture_radius, s)` with weight `(s / h) * (1 - perp / h)`;
//! summed over a fan of rays this is a partition of unity, so an open field
//! converges to the free-space value instead of showing ray-spacing moiré.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PathlossGrid, PropagationConfig};
use crate::error::{Error, Result};
use crate::geo::{BuildingMap, ObstacleClass, TxLocation};

/// Ray tubes wider than this (pixels) are clipped; keeps the footprint
/// search bounded on long reflected paths.
const MAX_TUBE_PX: f64 = 4.0;
/// Work split for the parallel launch. Fixed so the floating-point
/// summation order, and therefore the output, does not depend on the
/// number of threads.
const CHUNKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayLaunchConfig {
    pub n_rays: usize,
    pub max_reflections: usize,
    pub reflection_loss_db: f64,
    pub foliage_loss_db_per_m: f64,
    /// Minimum footprint half-width in pixels.
    pub rx_capture_radius: f64,
    pub floor_dbm: f64,
}

impl Default for RayLaunchConfig {
    fn default() -> Self {
        Self {
            n_rays: 720,
            max_reflections: 3,
            reflection_loss_db: 6.0,
            foliage_loss_db_per_m: 0.5,
            rx_capture_radius: 0.5,
            floor_dbm: super::FLOOR_DBM,
        }
    }
}

impl RayLaunchConfig {
    pub fn validate(&self, cfg: &PropagationConfig) -> Result<()> {
        if self.n_rays < 8 {
            return Err(Error::InvalidArgument(format!(
                "n_rays must be >= 8, got {}",
                self.n_rays
            )));
        }
        if self.floor_dbm > cfg.p_tx_dbm {
            return Err(Error::InvalidArgument("floor_dbm above p_tx_dbm".into()));
        }
        if !(self.rx_capture_radius > 0.0)
            || self.reflection_loss_db < 0.0
            || self.foliage_loss_db_per_m < 0.0
        {
            return Err(Error::InvalidArgument(
                "capture radius must be positive and losses non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One traversed cell of a straight segment, with the cumulative foliage
/// length (m) at entry.
#[derive(Debug, Clone, Copy)]
struct Step {
    x: i64,
    y: i64,
    t_in: f64,
    foliage_m: f64,
}

enum SegmentEnd {
    Exit,
    Wall { flip_x: bool, flip_y: bool },
}

struct Launcher<'a> {
    map: &'a BuildingMap,
    n: i64,
    mpp: f64,
    dtheta: f64,
    /// Linear power (mW) at 1 m.
    p1m: f64,
    rl: &'a RayLaunchConfig,
    tube_min: f64,
    map_tx: (usize, usize),
}

impl Launcher<'_> {
    fn blocked(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < self.n
            && y < self.n
            && self.map.cells()[(y * self.n + x) as usize] == ObstacleClass::Building
    }

    fn foliage(&self, x: i64, y: i64) -> bool {
        self.map.cells()[(y * self.n + x) as usize] == ObstacleClass::Foliage
    }

    fn outside(&self, x: i64, y: i64) -> bool {
        x < 0 || y < 0 || x >= self.n || y >= self.n
    }

    fn tube(&self, d_px: f64) -> f64 {
        (self.dtheta * d_px).min(MAX_TUBE_PX).max(self.tube_min)
    }

    /// Walks from `pos` (inside free cell `cell`) along unit `dir` until the
    /// ray leaves the map or meets a BUILDING face. Returns the segment
    /// length in pixels.
    fn trace(
        &self,
        pos: (f64, f64),
        cell: (i64, i64),
        dir: (f64, f64),
        steps: &mut Vec<Step>,
    ) -> (f64, SegmentEnd) {
        steps.clear();
        let (mut cx, mut cy) = cell;
        let sx = if dir.0 > 0.0 { 1 } else { -1 };
        let sy = if dir.1 > 0.0 { 1 } else { -1 };
        let axis_t = |p: f64, c: i64, d: f64| -> (f64, f64) {
            if d > 0.0 {
                (((c + 1) as f64 - p) / d, 1.0 / d)
            } else if d < 0.0 {
                ((p - c as f64) / -d, -1.0 / d)
            } else {
                (f64::INFINITY, f64::INFINITY)
            }
        };
        let (mut tmx, tdx) = axis_t(pos.0, cx, dir.0);
        let (mut tmy, tdy) = axis_t(pos.1, cy, dir.1);
        let mut t = 0.0;
        let mut foliage_m = 0.0;
        loop {
            steps.push(Step {
                x: cx,
                y: cy,
                t_in: t,
                foliage_m,
            });
            let t_next = tmx.min(tmy);
            if self.foliage(cx, cy) {
                foliage_m += (t_next - t) * self.mpp;
            }
            t = t_next;
            let tie = (tmx - tmy).abs() <= 1e-9 * t.max(1.0);
            if tie {
                let bx = self.blocked(cx + sx, cy);
                let by = self.blocked(cx, cy + sy);
                if bx || by {
                    return (
                        t,
                        SegmentEnd::Wall {
                            flip_x: bx,
                            flip_y: by,
                        },
                    );
                }
                if self.blocked(cx + sx, cy + sy) {
                    // convex corner hit head-on: send the ray back
                    return (
                        t,
                        SegmentEnd::Wall {
                            flip_x: true,
                            flip_y: true,
                        },
                    );
                }
                cx += sx;
                cy += sy;
                tmx += tdx;
                tmy += tdy;
            } else if tmx < tmy {
                if self.blocked(cx + sx, cy) {
                    return (
                        t,
                        SegmentEnd::Wall {
                            flip_x: true,
                            flip_y: false,
                        },
                    );
                }
                cx += sx;
                tmx += tdx;
            } else {
                if self.blocked(cx, cy + sy) {
                    return (
                        t,
                        SegmentEnd::Wall {
                            flip_x: false,
                            flip_y: true,
                        },
                    );
                }
                cy += sy;
                tmy += tdy;
            }
            if self.outside(cx, cy) {
                return (t, SegmentEnd::Exit);
            }
        }
    }

    /// Traces one ray and adds its footprint to `acc`.
    fn launch(
        &self,
        theta: f64,
        acc: &mut [f64],
        stamp: &mut [u32],
        seg_id: &mut u32,
        steps: &mut Vec<Step>,
    ) {
        let n = self.n;
        let tx = (self.map_tx.0 as f64 + 0.5, self.map_tx.1 as f64 + 0.5);
        let mut pos = tx;
        let mut cell = (self.map_tx.0 as i64, self.map_tx.1 as i64);
        let mut dir = (theta.cos(), theta.sin());
        let mut d0 = 0.0;
        let mut loss_db = 0.0;
        let mut foliage_m = 0.0;
        for bounce in 0..=self.rl.max_reflections {
            let (len, end) = self.trace(pos, cell, dir, steps);
            *seg_id = seg_id.wrapping_add(1);
            let r = (self.tube(d0 + len) + 0.5).floor() as i64;
            // a ray leaving the map still covers border cells whose centres
            // project past the exit point; at a wall that span belongs to
            // the reflected segment
            let t_max = match end {
                SegmentEnd::Exit => f64::INFINITY,
                SegmentEnd::Wall { .. } => len,
            };
            for step in steps.iter() {
                for oy in -r..=r {
                    for ox in -r..=r {
                        let (qx, qy) = (step.x + ox, step.y + oy);
                        if self.outside(qx, qy) {
                            continue;
                        }
                        let idx = (qy * n + qx) as usize;
                        if stamp[idx] == *seg_id {
                            continue;
                        }
                        stamp[idx] = *seg_id;
                        if self.map.cells()[idx] == ObstacleClass::Building {
                            continue;
                        }
                        let vx = qx as f64 + 0.5 - pos.0;
                        let vy = qy as f64 + 0.5 - pos.1;
                        let t = vx * dir.0 + vy * dir.1;
                        if t < 0.0 || t > t_max {
                            continue;
                        }
                        let perp = (vx * dir.1 - vy * dir.0).abs();
                        let d = d0 + t;
                        let h = self.tube(d);
                        if perp >= h {
                            continue;
                        }
                        let s = self.dtheta * d;
                        let w = (s / h) * (1.0 - perp / h);
                        let fol =
                            foliage_m + foliage_at(steps, t, self.mpp, |x, y| self.foliage(x, y));
                        let d_m = (d * self.mpp).max(1.0);
                        let att_db = loss_db + fol * self.rl.foliage_loss_db_per_m;
                        acc[idx] += w * self.p1m / (d_m * d_m) * 10f64.powf(-att_db / 10.0);
                    }
                }
            }
            let (flip_x, flip_y) = match end {
                SegmentEnd::Exit => return,
                SegmentEnd::Wall { flip_x, flip_y } => (flip_x, flip_y),
            };
            if bounce == self.rl.max_reflections {
                return;
            }
            let last = steps.last().expect("segment has a start cell");
            foliage_m += last.foliage_m
                + if self.foliage(last.x, last.y) {
                    (len - last.t_in) * self.mpp
                } else {
                    0.0
                };
            pos = (pos.0 + dir.0 * len, pos.1 + dir.1 * len);
            cell = (last.x, last.y);
            if flip_x {
                dir.0 = -dir.0;
            }
            if flip_y {
                dir.1 = -dir.1;
            }
            d0 += len;
            loss_db += self.rl.reflection_loss_db;
        }
    }
}

/// Foliage length (m) from the segment start to parameter `t`.
fn foliage_at(steps: &[Step], t: f64, mpp: f64, is_foliage: impl Fn(i64, i64) -> bool) -> f64 {
    let i = steps.partition_point(|s| s.t_in <= t).saturating_sub(1);
    let s = steps[i];
    s.foliage_m
        + if is_foliage(s.x, s.y) {
            (t - s.t_in) * mpp
        } else {
            0.0
        }
}

/// Ray-launch ground truth. The TX pixel itself is set to the free-space
/// power at 1 m; pixels no ray reaches get `floor_dbm`.
pub fn ray_launch(
    map: &BuildingMap,
    tx: &TxLocation,
    cfg: &PropagationConfig,
    rl: &RayLaunchConfig,
) -> Result<PathlossGrid> {
    cfg.validate()?;
    rl.validate(cfg)?;
    let tx = TxLocation::new(map, tx.x, tx.y, tx.h_bs)?;
    let n = map.size();
    let lambda = cfg.wavelength_m();
    let k = lambda / (4.0 * std::f64::consts::PI);
    let launcher = Launcher {
        map,
        n: n as i64,
        mpp: map.meters_per_pixel(),
        dtheta: 2.0 * std::f64::consts::PI / rl.n_rays as f64,
        p1m: 10f64.powf(cfg.p_tx_dbm / 10.0) * k * k,
        rl,
        tube_min: rl.rx_capture_radius,
        map_tx: (tx.x, tx.y),
    };

    let per_chunk = rl.n_rays.div_ceil(CHUNKS);
    let partials: Vec<Vec<f64>> = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; n * n];
            let mut stamp = vec![0u32; n * n];
            let mut seg_id = 0u32;
            let mut steps = Vec::new();
            for i in c * per_chunk..((c + 1) * per_chunk).min(rl.n_rays) {
                // half-step offset keeps rays off the exact grid axes
                let theta = (i as f64 + 0.5) * launcher.dtheta;
                launcher.launch(theta, &mut acc, &mut stamp, &mut seg_id, &mut steps);
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0; n * n];
    for part in &partials {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc[tx.y * n + tx.x] = launcher.p1m;

    let mut grid = PathlossGrid::empty(map, &tx);
    for (i, &p) in acc.iter().enumerate() {
        if grid.roi_mask[i] && p > 0.0 {
            grid.values[i] = (10.0 * p.log10()).max(rl.floor_dbm) as f32;
        } else {
            grid.values[i] = rl.floor_dbm as f32;
        }
    }
    Ok(grid)
}

/// Total linear power (mW) collected over the grid.
pub fn collected_power_mw(grid: &PathlossGrid, floor_dbm: f64) -> f64 {
    grid.values
        .iter()
        .zip(&grid.roi_mask)
        .filter(|(&v, &m)| m && (v as f64) > floor_dbm)
        .map(|(&v, _)| 10f64.powf(v as f64 / 10.0))
        .sum()
}
