use crate::error::{Error, Result};
use crate::raster::{GrayImage, RgbImage};

const TX_MARK: [u8; 3] = [255, 0, 0];
const NEUTRAL: [u8; 3] = [128, 128, 128];

fn mark_tx(img: &mut RgbImage, tx: [usize; 2], x_off: usize) {
    let (w, h) = (img.width, img.height);
    let [x, y] = tx;
    for d in -2isize..=2 {
        for (dx, dy) in [(d, 0), (0, d)] {
            let (px, py) = (x as isize + dx, y as isize + dy);
            if px >= 0 && py >= 0 && ((px as usize) + x_off) < w && (py as usize) < h {
                img.set(px as usize + x_off, py as usize, TX_MARK);
            }
        }
    }
}

/// Grayscale rendering of a gray map, with a red cross at `tx`.
pub fn render_heatmap(grid: &GrayImage, tx: Option<[usize; 2]>) -> RgbImage {
    let mut img = RgbImage::filled(grid.width, grid.height, [0, 0, 0]);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let g = grid.get(x, y);
            img.set(x, y, [g, g, g]);
        }
    }
    if let Some(tx) = tx {
        mark_tx(&mut img, tx, 0);
    }
    img
}

/// Diverging rendering of `a - b`: mid-gray where equal, towards red where
/// `a` is higher, towards blue where it is lower (full scale at 64 levels).
pub fn render_difference(a: &GrayImage, b: &GrayImage) -> Result<RgbImage> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape("difference of differently sized maps".into()));
    }
    let mut img = RgbImage::filled(a.width, a.height, NEUTRAL);
    for y in 0..a.height {
        for x in 0..a.width {
            let d = (a.get(x, y) as f64 - b.get(x, y) as f64) / 64.0;
            let t = d.clamp(-1.0, 1.0);
            let lerp = |from: f64, to: f64| (from + (to - from) * t.abs()).round() as u8;
            let rgb = if t >= 0.0 {
                [lerp(128.0, 255.0), lerp(128.0, 0.0), lerp(128.0, 0.0)]
            } else {
                [lerp(128.0, 0.0), lerp(128.0, 0.0), lerp(128.0, 255.0)]
            };
            img.set(x, y, rgb);
        }
    }
    Ok(img)
}

/// Prediction and ground truth next to each other, separated by a 2 px
/// white bar.
pub fn render_side_by_side(
    pred: &GrayImage,
    gt: &GrayImage,
    tx: Option<[usize; 2]>,
) -> Result<RgbImage> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Shape(
            "side-by-side of differently sized maps".into(),
        ));
    }
    let (w, h) = (pred.width, pred.height);
    let mut img = RgbImage::filled(2 * w + 2, h, [255, 255, 255]);
    for (off, src) in [(0, pred), (w + 2, gt)] {
        for y in 0..h {
            for x in 0..w {
                let g = src.get(x, y);
                img.set(x + off, y, [g, g, g]);
            }
        }
        if let Some(tx) = tx {
            mark_tx(&mut img, tx, off);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_grid_renders_uniformly() {
        let g = GrayImage::filled(8, 8, 77);
        let img = render_heatmap(&g, None);
        assert!(img.pixels.iter().all(|&v| v == 77));
    }

    #[test]
    fn identical_difference_is_neutral() {
        let g = GrayImage::new(4, 4, (0..16).map(|v| v * 10).collect()).unwrap();
        let img = render_difference(&g, &g).unwrap();
        assert!(img.pixels.chunks(3).all(|p| p == NEUTRAL));
    }

    #[test]
    fn rendering_is_pure() {
        let g = GrayImage::new(4, 4, (0..16).map(|v| v * 3).collect()).unwrap();
        let a = render_side_by_side(&g, &g, Some([1, 1]))
            .unwrap()
            .to_png()
            .unwrap();
        let b = render_side_by_side(&g, &g, Some([1, 1]))
            .unwrap()
            .to_png()
            .unwrap();
        assert_eq!(a, b);
    }
}
