//! Occlusion-probing estimation of the empirical receptive field: an 11×11
//! patch of seeded random pixels slides over the image, and the change it
//! causes in one keypoint's heatmap is recorded per position.

use rand::Rng;

use crate::img::{draw_rect_outline, image_to_tensor, RgbImage};
use crate::model::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ErfError {
    #[error("probe window {window} exceeds image side {side}")]
    WindowTooLarge { window: usize, side: usize },
    #[error("keypoint index {index} out of range for {channels} heatmap channels")]
    BadKeypoint { index: usize, channels: usize },
    #[error("forward pass must yield a single-sample C×h×w heatmap stack, got {0:?}")]
    BadForwardShape(Vec<usize>),
    #[error("importance map is all zero")]
    AllZero,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum of |ΔH| over the probed channel (default).
    SumAbs,
    /// |ΔH| at the reference heatmap cell only.
    ValueAtPeak,
}

#[derive(Debug, Clone, Copy)]
pub struct ErfConfig {
    pub window: usize,
    pub stride: usize,
    pub aggregation: Aggregation,
    /// Aggregate over every heatmap channel instead of the probed one.
    pub all_channels: bool,
    /// Reference cell for [`Aggregation::ValueAtPeak`]; defaults to the
    /// unmasked channel argmax.
    pub reference: Option<(usize, usize)>,
}

impl Default for ErfConfig {
    fn default() -> Self {
        ErfConfig {
            window: 11,
            stride: 4,
            aggregation: Aggregation::SumAbs,
            all_channels: false,
            reference: None,
        }
    }
}

/// Importance grid over probe positions (top-left corners, `stride` apart,
/// with a final clamped position so the window always fits).
#[derive(Debug, Clone)]
pub struct ErfMap {
    pub grid: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub positions_x: Vec<usize>,
    pub positions_y: Vec<usize>,
    pub window: usize,
    pub stride: usize,
    pub keypoint_index: usize,
    pub reference_location: (usize, usize),
    pub image_side: usize,
}

impl ErfMap {
    pub fn importance(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.cols + col]
    }

    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }
}

fn probe_positions(side: usize, window: usize, stride: usize) -> Vec<usize> {
    let span = side - window;
    let mut positions = Vec::new();
    let steps = span.div_ceil(stride);
    for k in 0..=steps {
        positions.push((k * stride).min(span));
    }
    positions.dedup();
    positions
}

/// Slides the random probe window over the image and measures, per position,
/// how much the keypoint's heatmap changes. The same patch content is reused
/// at every position so measurements are comparable.
pub fn estimate_erf<T, F>(
    forward: F,
    image: &RgbImage,
    keypoint_index: usize,
    cfg: &ErfConfig,
    rng: &mut impl Rng,
) -> Result<ErfMap, ErfError>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>, ModelError>,
{
    let side = image.width().min(image.height()) as usize;
    if cfg.window > side || cfg.window == 0 {
        return Err(ErfError::WindowTooLarge {
            window: cfg.window,
            side,
        });
    }
    let patch: Vec<[u8; 3]> = (0..cfg.window * cfg.window)
        .map(|_| [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()])
        .collect();

    let run = |img: &RgbImage| -> Result<Tensor<T>, ErfError> {
        let tensor = image_to_tensor::<T>(img).map_err(ModelError::from)?;
        let out = no_grad(|| forward(&tensor))?;
        let shape = out.shape().to_vec();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(ErfError::BadForwardShape(shape));
        }
        Ok(out)
    };

    let original = run(image)?;
    let (channels, h, w) = (
        original.shape()[1],
        original.shape()[2],
        original.shape()[3],
    );
    if keypoint_index >= channels {
        return Err(ErfError::BadKeypoint {
            index: keypoint_index,
            channels,
        });
    }
    let plane = h * w;
    let channel = &original.data()[keypoint_index * plane..(keypoint_index + 1) * plane];
    let reference = cfg.reference.unwrap_or_else(|| {
        let mut best = 0;
        for (i, v) in channel.iter().enumerate() {
            if *v > channel[best] {
                best = i;
            }
        }
        (best / w, best % w)
    });

    let xs = probe_positions(image.width() as usize, cfg.window, cfg.stride);
    let ys = probe_positions(image.height() as usize, cfg.window, cfg.stride);
    let mut grid = vec![0.0f64; xs.len() * ys.len()];
    for (ri, &py) in ys.iter().enumerate() {
        for (ci, &px) in xs.iter().enumerate() {
            let mut probed = image.clone();
            for dy in 0..cfg.window {
                for dx in 0..cfg.window {
                    probed.put_pixel(
                        (px + dx) as u32,
                        (py + dy) as u32,
                        image::Rgb(patch[dy * cfg.window + dx]),
                    );
                }
            }
            let masked = run(&probed)?;
            let importance = match cfg.aggregation {
                Aggregation::SumAbs => {
                    let range = if cfg.all_channels {
                        0..channels
                    } else {
                        keypoint_index..keypoint_index + 1
                    };
                    let mut acc = 0.0;
                    for c in range {
                        let a = &original.data()[c * plane..(c + 1) * plane];
                        let b = &masked.data()[c * plane..(c + 1) * plane];
                        for (x, y) in a.iter().zip(b) {
                            acc += (x.as_f64() - y.as_f64()).abs();
                        }
                    }
                    acc
                }
                Aggregation::ValueAtPeak => {
                    let at = keypoint_index * plane + reference.0 * w + reference.1;
                    (original.data()[at].as_f64() - masked.data()[at].as_f64()).abs()
                }
            };
            grid[ri * xs.len() + ci] = importance;
        }
    }

    Ok(ErfMap {
        rows: ys.len(),
        cols: xs.len(),
        grid,
        positions_x: xs,
        positions_y: ys,
        window: cfg.window,
        stride: cfg.stride,
        keypoint_index,
        reference_location: reference,
        image_side: side,
    })
}

/// Smallest axis-aligned probe box holding at least `mass_fraction` of the
/// total importance, with its pixel-space area as a fraction of the image.
#[derive(Debug, Clone, Copy)]
pub struct ErfStats {
    /// (row0, col0, row1, col1), inclusive probe indices.
    pub bounds: (usize, usize, usize, usize),
    /// (x0, y0, x1, y1) pixel box (probe footprints included).
    pub pixel_box: (usize, usize, usize, usize),
    pub mass_fraction: f64,
    pub area_fraction: f64,
}

pub fn erf_stats(map: &ErfMap, mass_fraction: f64) -> Result<ErfStats, ErfError> {
    let total = map.total();
    if total <= 0.0 {
        return Err(ErfError::AllZero);
    }
    let need = mass_fraction * total;
    let (rows, cols) = (map.rows, map.cols);
    // 2-D prefix sums over the probe grid.
    let mut prefix = vec![0.0f64; (rows + 1) * (cols + 1)];
    for r in 0..rows {
        for c in 0..cols {
            prefix[(r + 1) * (cols + 1) + c + 1] = map.grid[r * cols + c]
                + prefix[r * (cols + 1) + c + 1]
                + prefix[(r + 1) * (cols + 1) + c]
                - prefix[r * (cols + 1) + c];
        }
    }
    let box_sum = |r0: usize, c0: usize, r1: usize, c1: usize| {
        prefix[(r1 + 1) * (cols + 1) + c1 + 1] - prefix[r0 * (cols + 1) + c1 + 1]
            - prefix[(r1 + 1) * (cols + 1) + c0]
            + prefix[r0 * (cols + 1) + c0]
    };

    let eps = total * 1e-12;
    let mut best: Option<((usize, usize, usize, usize), usize)> = None;
    for r0 in 0..rows {
        for r1 in r0..rows {
            for c0 in 0..cols {
                for c1 in c0..cols {
                    if box_sum(r0, c0, r1, c1) + eps >= need {
                        let x0 = map.positions_x[c0];
                        let y0 = map.positions_y[r0];
                        let x1 = map.positions_x[c1] + map.window;
                        let y1 = map.positions_y[r1] + map.window;
                        let area = (x1 - x0) * (y1 - y0);
                        if best.map(|(_, a)| area < a).unwrap_or(true) {
                            best = Some(((r0, c0, r1, c1), area));
                        }
                    }
                }
            }
        }
    }
    let ((r0, c0, r1, c1), area) = best.expect("a full-grid box always reaches the mass");
    let pixel_box = (
        map.positions_x[c0],
        map.positions_y[r0],
        map.positions_x[c1] + map.window,
        map.positions_y[r1] + map.window,
    );
    Ok(ErfStats {
        bounds: (r0, c0, r1, c1),
        pixel_box,
        mass_fraction,
        area_fraction: area as f64 / (map.image_side * map.image_side) as f64,
    })
}

/// One-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips (ties are dropped by the caller).
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut pmf = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += pmf;
        }
        pmf *= (n - k) as f64 / (k + 1) as f64;
    }
    tail.min(1.0)
}

/// Grayscale importance image (probe footprints, max-blended) at image size.
pub fn render_importance(map: &ErfMap) -> RgbImage {
    let side = map.image_side as u32;
    let mut out = RgbImage::new(side, side);
    let max = map.grid.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return out;
    }
    for r in 0..map.rows {
        for c in 0..map.cols {
            let v = ((map.grid[r * map.cols + c] / max) * 255.0).round() as u8;
            for dy in 0..map.window {
                for dx in 0..map.window {
                    let x = (map.positions_x[c] + dx) as u32;
                    let y = (map.positions_y[r] + dy) as u32;
                    let px = out.get_pixel_mut(x, y);
                    if px.0[0] < v {
                        *px = image::Rgb([v, v, v]);
                    }
                }
            }
        }
    }
    out
}

/// Input image with green probe rectangles whose saturation tracks
/// importance, plus the mass box outline.
pub fn render_overlay(map: &ErfMap, image: &RgbImage, stats: Option<&ErfStats>) -> RgbImage {
    let mut out = image.clone();
    let max = map.grid.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for r in 0..map.rows {
            for c in 0..map.cols {
                let v = map.grid[r * map.cols + c] / max;
                if v <= 0.02 {
                    continue;
                }
                let green = (80.0 + 175.0 * v).round() as u8;
                let x0 = map.positions_x[c] as u32;
                let y0 = map.positions_y[r] as u32;
                draw_rect_outline(
                    &mut out,
                    x0,
                    y0,
                    x0 + map.window as u32 - 1,
                    y0 + map.window as u32 - 1,
                    [0, green, 0],
                );
            }
        }
    }
    if let Some(stats) = stats {
        let (x0, y0, x1, y1) = stats.pixel_box;
        draw_rect_outline(
            &mut out,
            x0 as u32,
            y0 as u32,
            (x1 - 1) as u32,
            (y1 - 1) as u32,
            [255, 255, 255],
        );
    }
    out
}

/// CSV of probe top-left coordinates and importances.
pub fn to_csv(map: &ErfMap) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("px,py,importance\n");
    for r in 0..map.rows {
        for c in 0..map.cols {
            let _ = writeln!(
                out,
                "{},{},{:.9}",
                map.positions_x[c],
                map.positions_y[r],
                map.grid[r * map.cols + c]
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, pool2d, ConvSpec, PoolKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probe_grid_covers_the_whole_image() {
        let positions = probe_positions(64, 11, 4);
        assert_eq!(positions.first(), Some(&0));
        assert_eq!(positions.last(), Some(&53));
        assert_eq!(positions.len(), (64 - 11usize).div_ceil(4) + 1);
        let exact = probe_positions(43, 11, 4); // 32 divisible by 4
        assert_eq!(exact.len(), 9);
        assert_eq!(exact.last(), Some(&32));
    }

    #[test]
    fn constant_model_has_zero_importance_everywhere() {
        let image = RgbImage::from_pixel(48, 48, image::Rgb([60, 60, 60]));
        let forward =
            |_: &Tensor<f32>| Ok(Tensor::full(vec![1, 3, 6, 6], 0.5f32));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = estimate_erf(forward, &image, 0, &ErfConfig::default(), &mut rng).unwrap();
        assert!(map.grid.iter().all(|&v| v == 0.0));
        assert!(matches!(erf_stats(&map, 0.95), Err(ErfError::AllZero)));
    }

    #[test]
    fn downsampling_copy_model_is_local() {
        // The model mean-pools the input by 8: each heatmap cell sees exactly
        // one 8x8 block. Probing anywhere else must leave the reference cell
        // untouched.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut image = RgbImage::new(48, 48);
        for px in image.pixels_mut() {
            *px = image::Rgb([rng.gen(), rng.gen(), rng.gen()]);
        }
        let forward = |x: &Tensor<f32>| {
            pool2d(x, PoolKind::Avg, (8, 8), (8, 8)).map_err(ModelError::from)
        };
        let cfg = ErfConfig {
            stride: 4,
            aggregation: Aggregation::ValueAtPeak,
            reference: Some((3, 3)), // pre-image px 24..32 on both axes
            ..ErfConfig::default()
        };
        let map = estimate_erf(forward, &image, 1, &cfg, &mut rng).unwrap();
        let mut nonzero = 0;
        for r in 0..map.rows {
            for c in 0..map.cols {
                let (px, py) = (map.positions_x[c], map.positions_y[r]);
                let intersects =
                    px < 32 && px + map.window > 24 && py < 32 && py + map.window > 24;
                if map.importance(r, c) > 0.0 {
                    nonzero += 1;
                    assert!(intersects, "importance outside the pre-image at ({px},{py})");
                }
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn erf_support_contained_in_dilated_theoretical_field() {
        // avg-pool 8 then 3x3 conv: the reference cell (2,2) theoretically
        // sees pixels [8,32) on both axes; probes outside that box dilated by
        // the window must measure exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut image = RgbImage::new(48, 48);
        for px in image.pixels_mut() {
            *px = image::Rgb([rng.gen(), rng.gen(), rng.gen()]);
        }
        let weights: Vec<f32> = (0..3 * 3 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let spec = ConvSpec::new(3, 3, (3, 3)).same_padding().with_bias(false);
        let w = Tensor::from_vec(vec![3, 3, 3, 3], weights).unwrap();
        let forward = move |x: &Tensor<f32>| {
            let pooled = pool2d(x, PoolKind::Avg, (8, 8), (8, 8))?;
            conv2d(&pooled, &w, None, &spec).map_err(Into::into)
        };
        let cfg = ErfConfig {
            stride: 4,
            aggregation: Aggregation::ValueAtPeak,
            reference: Some((2, 2)),
            ..ErfConfig::default()
        };
        let map = estimate_erf(forward, &image, 0, &cfg, &mut rng).unwrap();
        let (lo, hi) = (8usize, 32usize);
        for r in 0..map.rows {
            for c in 0..map.cols {
                let (px, py) = (map.positions_x[c], map.positions_y[r]);
                let intersects = px < hi && px + map.window > lo && py < hi && py + map.window > lo;
                if !intersects {
                    assert_eq!(map.importance(r, c), 0.0, "leak at ({px},{py})");
                }
            }
        }
    }

    #[test]
    fn estimate_is_deterministic_per_seed() {
        let image = RgbImage::from_pixel(32, 32, image::Rgb([10, 200, 80]));
        let forward = |x: &Tensor<f32>| {
            pool2d(x, PoolKind::Avg, (8, 8), (8, 8)).map_err(ModelError::from)
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            estimate_erf(forward, &image, 0, &ErfConfig { stride: 7, ..ErfConfig::default() }, &mut rng)
                .unwrap()
                .grid
        };
        assert_eq!(run(9), run(9));
    }

    fn map_from_grid(grid: Vec<f64>, rows: usize, cols: usize, window: usize, stride: usize) -> ErfMap {
        ErfMap {
            positions_x: (0..cols).map(|c| c * stride).collect(),
            positions_y: (0..rows).map(|r| r * stride).collect(),
            rows,
            cols,
            grid,
            window,
            stride,
            keypoint_index: 0,
            reference_location: (0, 0),
            image_side: (cols - 1) * stride + window,
        }
    }

    #[test]
    fn single_cell_box() {
        let mut grid = vec![0.0; 36];
        grid[2 * 6 + 4] = 3.0;
        let map = map_from_grid(grid, 6, 6, 4, 4);
        let stats = erf_stats(&map, 0.95).unwrap();
        assert_eq!(stats.bounds, (2, 4, 2, 4));
        assert_eq!(stats.pixel_box, (16, 8, 20, 12));
    }

    #[test]
    fn uniform_map_needs_most_cells() {
        let map = map_from_grid(vec![1.0; 100], 10, 10, 2, 2);
        let stats = erf_stats(&map, 0.95).unwrap();
        let (r0, c0, r1, c1) = stats.bounds;
        let cells = (r1 - r0 + 1) * (c1 - c0 + 1);
        assert!(cells >= 95, "box holds only {cells} cells");
    }

    #[test]
    fn two_cluster_split_keeps_only_the_large_cluster() {
        // 96% of mass in a 3x3 block top-left, 4% in one far cell.
        let mut grid = vec![0.0; 12 * 12];
        for r in 0..3 {
            for c in 0..3 {
                grid[r * 12 + c] = 96.0 / 9.0;
            }
        }
        grid[11 * 12 + 11] = 4.0;
        let map = map_from_grid(grid, 12, 12, 4, 4);
        let stats = erf_stats(&map, 0.95).unwrap();
        assert_eq!(stats.bounds, (0, 0, 2, 2));

        // Oracle: no box avoiding the far cell and smaller than 3x3 reaches
        // the mass, and boxes including the far cell are larger.
        let need = 0.95 * 100.0;
        for r0 in 0..12usize {
            for c0 in 0..12usize {
                for r1 in r0..12 {
                    for c1 in c0..12 {
                        let mut s = 0.0;
                        for r in r0..=r1 {
                            for c in c0..=c1 {
                                s += map.grid[r * 12 + c];
                            }
                        }
                        if s >= need {
                            let area = (r1 - r0 + 1) * (c1 - c0 + 1);
                            assert!(area >= 9, "smaller feasible box exists");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        assert!((sign_test_p(20, 0) - 0.5f64.powi(20)).abs() < 1e-15);
        assert!((sign_test_p(15, 5) - 0.02069473).abs() < 1e-7);
        assert!((sign_test_p(10, 10) - 0.58810).abs() < 1e-4);
        assert_eq!(sign_test_p(0, 0), 1.0);
    }
}
