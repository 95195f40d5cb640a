//! Bilinear infill of missing pathloss samples.

use crate::error::{Error, Result};
use crate::propagation::{PathlossGrid, FLOOR_DBM};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Row,
    Col,
}

/// Fills missing RoI pixels from the nearest known RoI pixels along rows
/// and columns.
///
/// Two separable passes are run, row-then-column and column-then-row; within
/// each, a pixel is first interpolated linearly between known neighbours on
/// the first axis, then on the second axis (using first-axis results). Pixels
/// with a known neighbour on one side only take that neighbour's value. The
/// two orders are averaged where both produce a value. BUILDING cells are
/// skipped over by the scans and never read or written. Pixels with no
/// known pixel on their row or column (after the first axis) keep the
/// floor value.
pub fn interpolate_missing(grid: &PathlossGrid, known: &[bool]) -> Result<PathlossGrid> {
    let n = grid.size;
    if known.len() != n * n {
        return Err(Error::Shape(format!(
            "known mask has {} entries for a {n}x{n} grid",
            known.len()
        )));
    }
    let seed: Vec<Option<f64>> = (0..n * n)
        .map(|i| (grid.roi_mask[i] && known[i]).then(|| grid.values[i] as f64))
        .collect();
    if seed.iter().all(Option::is_none) {
        return Err(Error::Domain(
            "no known RoI pixel to interpolate from".into(),
        ));
    }

    let a = separable(&seed, &grid.roi_mask, n, Axis::Row);
    let b = separable(&seed, &grid.roi_mask, n, Axis::Col);

    let mut out = grid.clone();
    for i in 0..n * n {
        if !grid.roi_mask[i] || seed[i].is_some() {
            continue;
        }
        let v = match (a[i], b[i]) {
            (Some(x), Some(y)) => 0.5 * (x + y),
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => FLOOR_DBM,
        };
        out.values[i] = v as f32;
    }
    Ok(out)
}

fn separable(seed: &[Option<f64>], roi: &[bool], n: usize, first: Axis) -> Vec<Option<f64>> {
    let second = if first == Axis::Row {
        Axis::Col
    } else {
        Axis::Row
    };
    let mut v = seed.to_vec();
    fill(&mut v, roi, n, first, false);
    fill(&mut v, roi, n, second, false);
    fill(&mut v, roi, n, first, true);
    fill(&mut v, roi, n, second, true);
    v
}

/// One sweep along `axis`. Reads a snapshot so fills within a line do not
/// feed each other. `one_sided` switches from two-sided interpolation to
/// nearest-value extrapolation.
fn fill(v: &mut [Option<f64>], roi: &[bool], n: usize, axis: Axis, one_sided: bool) {
    let idx = |line: usize, k: usize| match axis {
        Axis::Row => line * n + k,
        Axis::Col => k * n + line,
    };
    let mut known: Vec<(usize, f64)> = Vec::with_capacity(n);
    for line in 0..n {
        known.clear();
        known.extend((0..n).filter_map(|k| {
            let i = idx(line, k);
            if roi[i] {
                v[i].map(|x| (k, x))
            } else {
                None
            }
        }));
        if known.is_empty() {
            continue;
        }
        for k in 0..n {
            let i = idx(line, k);
            if !roi[i] || v[i].is_some() {
                continue;
            }
            let j = known.partition_point(|&(kk, _)| kk < k);
            let left = j.checked_sub(1).map(|j| known[j]);
            let right = known.get(j).copied();
            v[i] = match (left, right) {
                (Some((kl, vl)), Some((kr, vr))) if !one_sided => {
                    let t = (k - kl) as f64 / (kr - kl) as f64;
                    Some(vl + t * (vr - vl))
                }
                (Some(_), Some(_)) => None,
                (Some((_, x)), None) | (None, Some((_, x))) if one_sided => Some(x),
                _ => None,
            };
        }
    }
}
