//! Supercover line of sight between cell centers.

use super::{BuildingMap, Pixel};

/// Every cell touched by the segment joining the centers of `a` and `b`,
/// in traversal order, including both endpoints. When the segment passes
/// exactly through a grid corner, both side cells are reported.
pub fn supercover(a: Pixel, b: Pixel) -> Vec<Pixel> {
    let mut out = Vec::new();
    walk(a, b, |p| {
        out.push(p);
        true
    });
    out
}

/// True iff no BUILDING cell lies strictly between `tx` and `rx` on the
/// supercover traversal. FOLIAGE does not block.
pub fn line_of_sight(map: &BuildingMap, tx: Pixel, rx: Pixel) -> bool {
    debug_assert!(map.in_bounds(tx) && map.in_bounds(rx));
    if tx == rx {
        return true;
    }
    walk(tx, rx, |p| p == tx || p == rx || !map.is_building(p))
}

/// Visits the supercover cells from `a` to `b`; stops early (returning
/// false) when `visit` returns false.
fn walk(a: Pixel, b: Pixel, mut visit: impl FnMut(Pixel) -> bool) -> bool {
    let dx = b.x as i64 - a.x as i64;
    let dy = b.y as i64 - a.y as i64;
    let nx = dx.abs();
    let ny = dy.abs();
    let sx = dx.signum();
    let sy = dy.signum();
    let (mut x, mut y) = (a.x as i64, a.y as i64);
    if !visit(a) {
        return false;
    }
    let (mut ix, mut iy) = (0i64, 0i64);
    while ix < nx || iy < ny {
        // Sign of the next crossing: vertical edge first (<0), horizontal
        // edge first (>0), or both at once through a corner (==0).
        let decision = (1 + 2 * ix) * ny - (1 + 2 * iy) * nx;
        if decision == 0 {
            if !visit(Pixel::new((x + sx) as usize, y as usize))
                || !visit(Pixel::new(x as usize, (y + sy) as usize))
            {
                return false;
            }
            x += sx;
            y += sy;
            ix += 1;
            iy += 1;
        } else if decision < 0 {
            x += sx;
            ix += 1;
        } else {
            y += sy;
            iy += 1;
        }
        if !visit(Pixel::new(x as usize, y as usize)) {
            return false;
        }
    }
    true
}
