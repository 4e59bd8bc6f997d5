//! Minimal raster line charts.

use camoforge::image::RgbImage;

const W: usize = 480;
const H: usize = 360;
const MARGIN: usize = 40;

pub struct Series {
    pub points: Vec<[f64; 2]>,
    pub color: [f64; 3],
    /// Index drawn with a larger marker.
    pub highlight: Option<usize>,
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn dot(&mut self, x: i64, y: i64, c: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            self.img.set_pixel(y as usize, x as usize, c);
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), c: [f64; 3]) {
        let (mut x, mut y) = a;
        let (dx, dy) = ((b.0 - x).abs(), -(b.1 - y).abs());
        let (sx, sy) = (if x < b.0 { 1 } else { -1 }, if y < b.1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.dot(x, y, c);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn square(&mut self, p: (i64, i64), r: i64, c: [f64; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                self.dot(p.0 + dx, p.1 + dy, c);
            }
        }
    }
}

/// Chart of series over the unit square: x right, y up, gridlines every 0.2.
pub fn unit_chart(series: &[Series]) -> RgbImage {
    let mut cv = Canvas { img: RgbImage::filled(W, H, [1.0; 3]) };
    let (pw, ph) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    let to_px = |p: [f64; 2]| -> (i64, i64) {
        let x = MARGIN as f64 + p[0].clamp(0.0, 1.0) * pw;
        let y = (H - MARGIN) as f64 - p[1].clamp(0.0, 1.0) * ph;
        (x.round() as i64, y.round() as i64)
    };
    let grid = [0.85; 3];
    for k in 0..=5 {
        let t = k as f64 / 5.0;
        cv.line(to_px([t, 0.0]), to_px([t, 1.0]), grid);
        cv.line(to_px([0.0, t]), to_px([1.0, t]), grid);
        // tick marks
        let (x, y) = to_px([t, 0.0]);
        cv.line((x, y), (x, y + 5), [0.0; 3]);
        let (x, y) = to_px([0.0, t]);
        cv.line((x - 5, y), (x, y), [0.0; 3]);
    }
    cv.line(to_px([0.0, 0.0]), to_px([1.0, 0.0]), [0.0; 3]);
    cv.line(to_px([0.0, 0.0]), to_px([0.0, 1.0]), [0.0; 3]);
    for s in series {
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for w in pts.windows(2) {
            cv.line(to_px(w[0]), to_px(w[1]), s.color);
        }
        for (i, &p) in s.points.iter().enumerate() {
            let r = if s.highlight == Some(i) { 5 } else { 2 };
            cv.square(to_px(p), r, s.color);
        }
    }
    cv.img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_points_inside_the_frame() {
        let img = unit_chart(&[Series { points: vec![[0.0, 0.0], [1.0, 1.0]], color: [1.0, 0.0, 0.0], highlight: Some(1) }]);
        assert_eq!((img.width, img.height), (W, H));
        assert_eq!(img.pixel(H - MARGIN, MARGIN), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(MARGIN, W - MARGIN), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(H / 2, W / 2), [1.0, 0.0, 0.0]);
    }
}
