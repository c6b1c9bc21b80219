//! Keypoint/heatmap conversion plus flip and multi-scale test-time averaging.

use crate::img::{letterbox, RgbImage};
use crate::scalar::Scalar;
use crate::tensor::{resize_bilinear, scale, Tensor, TensorError, TensorResult};

pub const NUM_KEYPOINTS: usize = 16;

/// 16-keypoint body model indices.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax", "neck",
    "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
];

/// Left/right pairs (ankles, knees, hips, wrists, elbows, shoulders).
/// Pelvis, thorax, neck and head top are unpaired.
pub const FLIP_PAIRS: [(usize, usize); 6] = [(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Visible,
    Occluded,
    Absent,
}

impl Visibility {
    /// Annotation encoding: 0 absent, 1 occluded, 2 visible.
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Visibility::Absent),
            1 => Some(Visibility::Occluded),
            2 => Some(Visibility::Visible),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Visibility::Absent => 0,
            Visibility::Occluded => 1,
            Visibility::Visible => 2,
        }
    }

    pub fn is_annotated(self) -> bool {
        !matches!(self, Visibility::Absent)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: Visibility,
}

impl Keypoint {
    pub fn absent() -> Self {
        Keypoint {
            x: 0.0,
            y: 0.0,
            visibility: Visibility::Absent,
        }
    }
}

/// The 16 body keypoints of one person, plus the head size used as the
/// reference length for the distance-thresholded accuracy metric.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KeypointSet {
    pub points: [Keypoint; NUM_KEYPOINTS],
    pub head_size: f64,
}

impl KeypointSet {
    pub fn all_absent() -> Self {
        KeypointSet {
            points: [Keypoint::absent(); NUM_KEYPOINTS],
            head_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub heatmap_size: usize,
    pub output_stride: usize,
    /// Ground-truth Gaussian std, in heatmap cells.
    pub sigma: f64,
    pub flip_pairs: Vec<(usize, usize)>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            heatmap_size: 32,
            output_stride: 8,
            sigma: 2.0,
            flip_pairs: FLIP_PAIRS.to_vec(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> TensorResult<()> {
        let fail = |message: String| TensorError::InvalidSpec {
            context: "codec",
            message,
        };
        if self.sigma <= 0.0 {
            return Err(fail("sigma must be positive".into()));
        }
        if self.heatmap_size == 0 || self.output_stride == 0 {
            return Err(fail("heatmap_size and output_stride must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &(l, r) in &self.flip_pairs {
            if l >= NUM_KEYPOINTS || r >= NUM_KEYPOINTS || l == r {
                return Err(fail(format!("invalid flip pair ({l}, {r})")));
            }
            if !seen.insert(l) || !seen.insert(r) {
                return Err(fail(format!("flip pair indices overlap at ({l}, {r})")));
            }
        }
        Ok(())
    }
}

/// Gaussian target heatmaps, one K×h×h channel per keypoint. Keypoints map to
/// heatmap coordinates by division with the output stride; absent keypoints
/// produce all-zero channels.
pub fn encode_heatmaps<T: Scalar>(kps: &KeypointSet, cfg: &CodecConfig) -> TensorResult<Tensor<T>> {
    cfg.validate()?;
    let h = cfg.heatmap_size;
    let mut data = vec![T::zero(); NUM_KEYPOINTS * h * h];
    let two_sigma_sq = 2.0 * cfg.sigma * cfg.sigma;
    for (k, point) in kps.points.iter().enumerate() {
        if !point.visibility.is_annotated() {
            continue;
        }
        let cx = point.x / cfg.output_stride as f64;
        let cy = point.y / cfg.output_stride as f64;
        for y in 0..h {
            for x in 0..h {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                data[(k * h + y) * h + x] = T::cast((-d2 / two_sigma_sq).exp());
            }
        }
    }
    Tensor::from_vec(vec![NUM_KEYPOINTS, h, h], data)
}

/// One decoded keypoint in image coordinates, with its peak confidence.
#[derive(Debug, Clone, Copy)]
pub struct DecodedPoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct DecodedPose {
    pub points: Vec<DecodedPoint>,
}

/// Peak decoding: per channel the row-major-first argmax, refined by a
/// quarter-cell shift toward the larger immediate neighbour on each axis
/// (skipped at map borders), scaled back to image coordinates.
pub fn decode_heatmaps<T: Scalar>(maps: &Tensor<T>, cfg: &CodecConfig) -> TensorResult<DecodedPose> {
    let shape = maps.shape();
    if shape.len() != 3 {
        return Err(TensorError::RankMismatch {
            context: "decode_heatmaps",
            expected: 3,
            shape: shape.to_vec(),
        });
    }
    let (k_n, h, w) = (shape[0], shape[1], shape[2]);
    let data = maps.data();
    let mut points = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let map = &data[k * h * w..(k + 1) * h * w];
        let mut best = 0usize;
        for (i, v) in map.iter().enumerate() {
            if *v > map[best] {
                best = i;
            }
        }
        let (by, bx) = (best / w, best % w);
        let mut x = bx as f64;
        let mut y = by as f64;
        if bx > 0 && bx + 1 < w {
            let right = map[by * w + bx + 1];
            let left = map[by * w + bx - 1];
            if right > left {
                x += 0.25;
            } else if left > right {
                x -= 0.25;
            }
        }
        if by > 0 && by + 1 < h {
            let down = map[(by + 1) * w + bx];
            let up = map[(by - 1) * w + bx];
            if down > up {
                y += 0.25;
            } else if up > down {
                y -= 0.25;
            }
        }
        points.push(DecodedPoint {
            x: x * cfg.output_stride as f64,
            y: y * cfg.output_stride as f64,
            confidence: map[best].as_f64(),
        });
    }
    Ok(DecodedPose { points })
}

/// Mirrors the last (width) axis of an N×C×H×W tensor.
pub fn flip_horizontal<T: Scalar>(t: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let shape = t.shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "flip_horizontal",
            expected: 4,
            shape,
        });
    }
    let w = shape[3];
    let rows = t.numel() / w;
    let src = t.data();
    let mut data = Vec::with_capacity(t.numel());
    for r in 0..rows {
        let row = &src[r * w..(r + 1) * w];
        data.extend(row.iter().rev().copied());
    }
    Tensor::from_vec(shape, data)
}

/// Swaps left/right channel pairs on axis 1.
pub fn swap_channel_pairs<T: Scalar>(t: &Tensor<T>, pairs: &[(usize, usize)]) -> TensorResult<Tensor<T>> {
    let shape = t.shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "swap_channel_pairs",
            expected: 4,
            shape,
        });
    }
    let (n_b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut data = t.data().to_vec();
    for n in 0..n_b {
        for &(l, r) in pairs {
            for i in 0..plane {
                data.swap((n * c + l) * plane + i, (n * c + r) * plane + i);
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Heatmaps averaged over the input and its horizontal mirror: the mirrored
/// prediction is un-mirrored and its left/right channel pairs swapped before
/// the mean.
pub fn flip_average<T, F>(forward: F, image: &Tensor<T>, cfg: &CodecConfig) -> TensorResult<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> TensorResult<Tensor<T>>,
{
    let plain = forward(image)?;
    let mirrored = forward(&flip_horizontal(image)?)?;
    let unflipped = swap_channel_pairs(&flip_horizontal(&mirrored)?, &cfg.flip_pairs)?;
    Ok(scale(
        &crate::tensor::add(&plain, &unflipped)?,
        T::cast(0.5),
    ))
}

/// Heatmaps averaged over rescaled versions of the image. Each scaled image
/// is re-padded to `input_size` with the fill color before the forward pass;
/// heatmaps are bilinearly resized to the codec resolution (when a model
/// produces another size) before the equal-weight mean.
pub fn multiscale_average<T, F>(
    forward: F,
    image: &RgbImage,
    scales: &[f64],
    input_size: usize,
    fill: [u8; 3],
    cfg: &CodecConfig,
) -> TensorResult<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> TensorResult<Tensor<T>>,
{
    if scales.is_empty() {
        return Err(TensorError::InvalidSpec {
            context: "multiscale_average",
            message: "scale list must not be empty".into(),
        });
    }
    let mut acc: Option<Tensor<T>> = None;
    for &s in scales {
        let (canvas, _) = letterbox(image, input_size as u32, s, fill);
        let tensor = crate::img::image_to_tensor::<T>(&canvas)?;
        let mut maps = forward(&tensor)?;
        let hw = (maps.shape()[2], maps.shape()[3]);
        if hw != (cfg.heatmap_size, cfg.heatmap_size) {
            maps = resize_bilinear(&maps, (cfg.heatmap_size, cfg.heatmap_size))?;
        }
        acc = Some(match acc {
            None => maps,
            Some(prev) => crate::tensor::add(&prev, &maps)?,
        });
    }
    Ok(scale(&acc.expect("non-empty scales"), T::cast(1.0 / scales.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aligned_kps() -> KeypointSet {
        let mut kps = KeypointSet::all_absent();
        kps.head_size = 20.0;
        for (i, p) in kps.points.iter_mut().enumerate() {
            *p = Keypoint {
                x: ((i * 2) % 30 + 1) as f64 * 8.0,
                y: ((i * 3) % 30 + 1) as f64 * 8.0,
                visibility: Visibility::Visible,
            };
        }
        kps
    }

    #[test]
    fn grid_aligned_peak_is_one() {
        let mut kps = KeypointSet::all_absent();
        kps.points[4] = Keypoint {
            x: 16.0 * 8.0,
            y: 16.0 * 8.0,
            visibility: Visibility::Visible,
        };
        let maps = encode_heatmaps::<f64>(&kps, &CodecConfig::default()).unwrap();
        let v = maps.data()[(4 * 32 + 16) * 32 + 16];
        assert_eq!(v, 1.0);
    }

    #[test]
    fn value_at_sigma_distance_is_exp_minus_half() {
        let cfg = CodecConfig::default();
        let mut kps = KeypointSet::all_absent();
        kps.points[0] = Keypoint {
            x: 16.0 * 8.0,
            y: 16.0 * 8.0,
            visibility: Visibility::Visible,
        };
        let maps = encode_heatmaps::<f64>(&kps, &cfg).unwrap();
        // Cell two cells (= sigma) to the right of the peak.
        let v = maps.data()[(16usize * 32) + 18];
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn absent_keypoint_channel_is_zero() {
        let mut kps = aligned_kps();
        kps.points[7].visibility = Visibility::Absent;
        let maps = encode_heatmaps::<f64>(&kps, &CodecConfig::default()).unwrap();
        assert!(maps.data()[7 * 32 * 32..8 * 32 * 32].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_recovers_grid_aligned_exactly() {
        let cfg = CodecConfig::default();
        let kps = aligned_kps();
        let maps = encode_heatmaps::<f64>(&kps, &cfg).unwrap();
        let decoded = decode_heatmaps(&maps, &cfg).unwrap();
        for (d, gt) in decoded.points.iter().zip(&kps.points) {
            assert_eq!((d.x, d.y), (gt.x, gt.y));
            assert_eq!(d.confidence, 1.0);
        }
    }

    #[test]
    fn constant_map_decodes_to_origin() {
        let cfg = CodecConfig::default();
        let maps = Tensor::<f64>::full(vec![16, 32, 32], 0.3);
        let decoded = decode_heatmaps(&maps, &cfg).unwrap();
        assert_eq!((decoded.points[0].x, decoded.points[0].y), (0.0, 0.0));
    }

    #[test]
    fn quarter_shift_toward_larger_neighbor() {
        let cfg = CodecConfig::default();
        let mut data = vec![0.0f64; 32 * 32];
        data[10 * 32 + 10] = 0.9;
        data[10 * 32 + 11] = 0.8;
        let maps = Tensor::from_vec(vec![1, 32, 32], data).unwrap();
        let d = decode_heatmaps(&maps, &cfg).unwrap();
        assert_eq!(d.points[0].x, (10.0 + 0.25) * 8.0);
        assert_eq!(d.points[0].y, 10.0 * 8.0);
    }

    #[test]
    fn translation_covariance_on_grid() {
        let cfg = CodecConfig::default();
        let mut kps = KeypointSet::all_absent();
        kps.points[3] = Keypoint {
            x: 10.0 * 8.0,
            y: 12.0 * 8.0,
            visibility: Visibility::Visible,
        };
        let a = encode_heatmaps::<f64>(&kps, &cfg).unwrap();
        kps.points[3].x += 3.0 * 8.0;
        let b = encode_heatmaps::<f64>(&kps, &cfg).unwrap();
        for y in 0..32 {
            for x in 0..29 {
                assert_eq!(
                    a.data()[(3 * 32 + y) * 32 + x],
                    b.data()[(3 * 32 + y) * 32 + x + 3]
                );
            }
        }
    }

    #[test]
    fn roundtrip_error_within_half_stride() {
        use rand::{Rng, SeedableRng};
        let cfg = CodecConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        // Keypoints within the heatmap-representable range: at most half a
        // stride past the last cell center (here 31*8 + 4 = 252).
        let limit = 31.0 * 8.0 + 4.0;
        for _ in 0..200 {
            let mut kps = KeypointSet::all_absent();
            for p in kps.points.iter_mut() {
                *p = Keypoint {
                    x: rng.gen_range(0.0..=limit),
                    y: rng.gen_range(0.0..=limit),
                    visibility: Visibility::Visible,
                };
            }
            let maps = encode_heatmaps::<f64>(&kps, &cfg).unwrap();
            let decoded = decode_heatmaps(&maps, &cfg).unwrap();
            for (d, gt) in decoded.points.iter().zip(&kps.points) {
                let err = ((d.x - gt.x).powi(2) + (d.y - gt.y).powi(2)).sqrt();
                assert!(
                    err <= 0.5 * cfg.output_stride as f64 * (2.0f64).sqrt() + 1e-9,
                    "roundtrip error {err}"
                );
                assert!((d.x - gt.x).abs() <= 0.5 * cfg.output_stride as f64 + 1e-9);
                assert!((d.y - gt.y).abs() <= 0.5 * cfg.output_stride as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn flip_average_of_constant_head_is_pair_swapped_mean() {
        let cfg = CodecConfig::default();
        // Model ignores its input: channel k is the constant k.
        let constant = |_: &Tensor<f64>| {
            let mut data = Vec::new();
            for k in 0..16 {
                data.extend(std::iter::repeat(k as f64).take(4 * 4));
            }
            Tensor::from_vec(vec![1, 16, 4, 4], data)
        };
        let image = Tensor::<f64>::zeros(vec![1, 3, 8, 8]);
        let out = flip_average(constant, &image, &cfg).unwrap();
        // Paired channels average to the pair mean; unpaired stay put.
        for &(l, r) in &cfg.flip_pairs {
            let expected = (l + r) as f64 / 2.0;
            assert!(out.data()[l * 16..(l + 1) * 16].iter().all(|&v| v == expected));
            assert!(out.data()[r * 16..(r + 1) * 16].iter().all(|&v| v == expected));
        }
        assert!(out.data()[6 * 16..7 * 16].iter().all(|&v| v == 6.0));
    }

    #[test]
    fn flip_average_is_idempotent_through_identity_model() {
        use rand::{Rng, SeedableRng};
        let cfg = CodecConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..16 * 6 * 6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let maps = Tensor::from_vec(vec![1, 16, 6, 6], data).unwrap();
        let identity = |x: &Tensor<f64>| Ok(x.clone());
        let once = flip_average(identity, &maps, &cfg).unwrap();
        let twice = flip_average(identity, &once, &cfg).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn multiscale_single_scale_equals_forward() {
        let cfg = CodecConfig {
            heatmap_size: 4,
            output_stride: 8,
            ..CodecConfig::default()
        };
        let image = RgbImage::from_pixel(32, 32, image::Rgb([100, 150, 200]));
        let forward = |x: &Tensor<f64>| {
            // Mean-pool the first channel down to 4x4 replicated over 16 channels.
            let pooled = crate::tensor::pool2d(x, crate::tensor::PoolKind::Avg, (8, 8), (8, 8))?;
            let one = Tensor::from_vec(
                vec![1, pooled.shape()[1], 4, 4],
                pooled.data().to_vec(),
            )?;
            crate::tensor::concat(&vec![one; 6], 1)
        };
        let single = multiscale_average(forward, &image, &[1.0], 32, [128, 128, 128], &cfg).unwrap();
        let (canvas, _) = letterbox(&image, 32, 1.0, [128, 128, 128]);
        let direct = forward(&crate::img::image_to_tensor::<f64>(&canvas).unwrap()).unwrap();
        assert_eq!(single.data(), direct.data());
        assert!(multiscale_average(forward, &image, &[], 32, [128, 128, 128], &cfg).is_err());
    }

    #[test]
    fn multiscale_of_constant_model_is_constant() {
        let cfg = CodecConfig {
            heatmap_size: 4,
            output_stride: 8,
            ..CodecConfig::default()
        };
        let image = RgbImage::from_pixel(32, 32, image::Rgb([0, 0, 0]));
        let forward = |_: &Tensor<f64>| Ok(Tensor::full(vec![1, 16, 4, 4], 0.42));
        let out =
            multiscale_average(forward, &image, &[0.75, 1.0, 1.25], 32, [128, 128, 128], &cfg).unwrap();
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }
}
