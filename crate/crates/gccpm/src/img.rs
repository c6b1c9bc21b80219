//! Raster image helpers: tensor conversion, affine warping and the drawing
//! primitives the synthetic renderer and visualizations need.

pub use image::RgbImage;
use image::Rgb;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorResult};

/// 2-D affine map `p -> M·p + t` over continuous pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [tx, ty],
        }
    }

    pub fn scaling(s: f64) -> Self {
        Affine {
            m: [[s, 0.0], [0.0, s]],
            t: [0.0, 0.0],
        }
    }

    pub fn rotation(theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Affine {
            m: [[cos, -sin], [sin, cos]],
            t: [0.0, 0.0],
        }
    }

    /// Horizontal mirror of an image `width` pixels wide: x -> width-1-x.
    pub fn mirror_x(width: usize) -> Self {
        Affine {
            m: [[-1.0, 0.0], [0.0, 1.0]],
            t: [(width - 1) as f64, 0.0],
        }
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Affine) -> Affine {
        let a = self.m;
        let b = other.m;
        Affine {
            m: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ],
            t: [
                a[0][0] * other.t[0] + a[0][1] * other.t[1] + self.t[0],
                a[1][0] * other.t[0] + a[1][1] * other.t[1] + self.t[1],
            ],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    pub fn inverse(&self) -> Affine {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        Affine {
            m: inv,
            t: [
                -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
                -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
            ],
        }
    }
}

/// N×3×H×W tensor from images, normalizing pixels to [-0.5, 0.5].
pub fn images_to_tensor<T: Scalar>(images: &[&RgbImage]) -> TensorResult<Tensor<T>> {
    let (w, h) = images[0].dimensions();
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        for c in 0..3usize {
            for y in 0..h {
                for x in 0..w {
                    let v = img.get_pixel(x, y).0[c] as f64 / 255.0 - 0.5;
                    data.push(T::cast(v));
                }
            }
        }
    }
    Tensor::from_vec(vec![images.len(), 3, h as usize, w as usize], data)
}

pub fn image_to_tensor<T: Scalar>(image: &RgbImage) -> TensorResult<Tensor<T>> {
    images_to_tensor(&[image])
}

/// Warps `src` through `map` (source -> destination coordinates) into a
/// `width`×`height` canvas, sampling bilinearly and filling uncovered pixels.
pub fn warp_affine(
    src: &RgbImage,
    map: &Affine,
    width: u32,
    height: u32,
    fill: [u8; 3],
) -> RgbImage {
    let inv = map.inverse();
    let (sw, sh) = src.dimensions();
    let mut out = RgbImage::from_pixel(width, height, Rgb(fill));
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if sx < -0.5 || sy < -0.5 || sx > sw as f64 - 0.5 || sy > sh as f64 - 0.5 {
                continue;
            }
            let x0 = sx.floor().clamp(0.0, (sw - 1) as f64) as u32;
            let y0 = sy.floor().clamp(0.0, (sh - 1) as f64) as u32;
            let x1 = (x0 + 1).min(sw - 1);
            let y1 = (y0 + 1).min(sh - 1);
            let tx = (sx - x0 as f64).clamp(0.0, 1.0);
            let ty = (sy - y0 as f64).clamp(0.0, 1.0);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let p00 = src.get_pixel(x0, y0).0[c] as f64;
                let p01 = src.get_pixel(x1, y0).0[c] as f64;
                let p10 = src.get_pixel(x0, y1).0[c] as f64;
                let p11 = src.get_pixel(x1, y1).0[c] as f64;
                let top = p00 * (1.0 - tx) + p01 * tx;
                let bot = p10 * (1.0 - tx) + p11 * tx;
                px[c] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}

/// Scales `src` so its longer side is `scale * target` and centers it on a
/// `target`×`target` canvas filled with `fill`. Returns the canvas and the
/// source-to-canvas affine map.
pub fn letterbox(src: &RgbImage, target: u32, scale: f64, fill: [u8; 3]) -> (RgbImage, Affine) {
    let (sw, sh) = src.dimensions();
    let base = target as f64 / sw.max(sh) as f64;
    let s = base * scale;
    let center_src = Affine::translation(-((sw as f64 - 1.0) / 2.0), -((sh as f64 - 1.0) / 2.0));
    let to_canvas = Affine::translation((target as f64 - 1.0) / 2.0, (target as f64 - 1.0) / 2.0)
        .compose(&Affine::scaling(s))
        .compose(&center_src);
    (warp_affine(src, &to_canvas, target, target, fill), to_canvas)
}

fn put_if_inside(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Solid disc centered at (cx, cy).
pub fn draw_disc(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, color: [u8; 3]) {
    let r = radius.ceil() as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let x = cx.round() as i64 + dx;
            let y = cy.round() as i64 + dy;
            let fx = x as f64 - cx;
            let fy = y as f64 - cy;
            if fx * fx + fy * fy <= radius * radius {
                put_if_inside(img, x, y, color);
            }
        }
    }
}

/// Line segment of the given thickness (distance-to-segment fill).
pub fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), thickness: f64, color: [u8; 3]) {
    let half = thickness / 2.0;
    let (min_x, max_x) = (a.0.min(b.0) - half, a.0.max(b.0) + half);
    let (min_y, max_y) = (a.1.min(b.1) - half, a.1.max(b.1) + half);
    let len2 = (b.0 - a.0).powi(2) + (b.1 - a.1).powi(2);
    for y in min_y.floor() as i64..=max_y.ceil() as i64 {
        for x in min_x.floor() as i64..=max_x.ceil() as i64 {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - a.0) * (b.0 - a.0) + (py - a.1) * (b.1 - a.1)) / len2).clamp(0.0, 1.0)
            };
            let cx = a.0 + t * (b.0 - a.0);
            let cy = a.1 + t * (b.1 - a.1);
            if (px - cx).powi(2) + (py - cy).powi(2) <= half * half {
                put_if_inside(img, x, y, color);
            }
        }
    }
}

/// Fills a rectangle of size `w`×`h` centered at `center`, rotated by
/// `angle`, with one uniform color. A pixel is covered when its center lies
/// inside the closed rectangle. Returns the covered pixel coordinates.
pub fn fill_rotated_rect(
    img: &mut RgbImage,
    center: (f64, f64),
    w: f64,
    h: f64,
    angle: f64,
    color: [u8; 3],
) -> Vec<(u32, u32)> {
    let (sin, cos) = angle.sin_cos();
    let radius = (w * w + h * h).sqrt() / 2.0;
    let mut covered = Vec::new();
    let y0 = (center.1 - radius).floor() as i64;
    let y1 = (center.1 + radius).ceil() as i64;
    let x0 = (center.0 - radius).floor() as i64;
    let x1 = (center.0 + radius).ceil() as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if x < 0 || y < 0 || x as u32 >= img.width() || y as u32 >= img.height() {
                continue;
            }
            // Rotate the pixel center into the rectangle frame.
            let dx = x as f64 - center.0;
            let dy = y as f64 - center.1;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if u.abs() <= w / 2.0 && v.abs() <= h / 2.0 {
                img.put_pixel(x as u32, y as u32, Rgb(color));
                covered.push((x as u32, y as u32));
            }
        }
    }
    covered
}

/// Axis-aligned rectangle outline.
pub fn draw_rect_outline(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    for x in x0..=x1.min(img.width() - 1) {
        put_if_inside(img, x as i64, y0 as i64, color);
        put_if_inside(img, x as i64, y1 as i64, color);
    }
    for y in y0..=y1.min(img.height() - 1) {
        put_if_inside(img, x0 as i64, y as i64, color);
        put_if_inside(img, x1 as i64, y as i64, color);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_inverse_roundtrips() {
        let map = Affine::translation(3.0, -2.0)
            .compose(&Affine::rotation(0.7))
            .compose(&Affine::scaling(1.3));
        let inv = map.inverse();
        let (x, y) = map.apply(5.0, 7.0);
        let (bx, by) = inv.apply(x, y);
        assert!((bx - 5.0).abs() < 1e-9 && (by - 7.0).abs() < 1e-9);
    }

    #[test]
    fn letterbox_centers_and_scales() {
        let src = RgbImage::from_pixel(100, 50, image::Rgb([10, 20, 30]));
        let (out, map) = letterbox(&src, 64, 1.0, [128, 128, 128]);
        assert_eq!(out.dimensions(), (64, 64));
        // Source center maps to canvas center.
        let (cx, cy) = map.apply(49.5, 24.5);
        assert!((cx - 31.5).abs() < 1e-9 && (cy - 31.5).abs() < 1e-9);
    }

    #[test]
    fn rotated_rect_reports_exact_covered_pixels() {
        let mut img = RgbImage::from_pixel(40, 40, image::Rgb([0, 0, 0]));
        let before = img.clone();
        let covered = fill_rotated_rect(&mut img, (20.0, 20.0), 10.0, 6.0, 0.5, [255, 0, 0]);
        let mut changed = 0;
        for y in 0..40 {
            for x in 0..40 {
                if img.get_pixel(x, y) != before.get_pixel(x, y) {
                    changed += 1;
                    assert!(covered.contains(&(x, y)));
                    assert_eq!(img.get_pixel(x, y).0, [255, 0, 0]);
                }
            }
        }
        assert_eq!(changed, covered.len());
        assert!(changed > 0);
    }
}
