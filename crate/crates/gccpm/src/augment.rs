//! Training-time augmentations: geometric jitter with letterboxing, the
//! body-masking occlusion, keypoint masking and color-channel permutation.
//! Everything is deterministic given the caller's rng stream.

use rand::Rng;

use crate::codec::{Keypoint, KeypointSet, Visibility};
use crate::img::{fill_rotated_rect, warp_affine, Affine, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyMaskConfig {
    pub enabled: bool,
    /// Upper bound on each quadrangle side, as a fraction of the input size.
    pub max_side_frac: f64,
    /// Mask center jitter around the image center, as a fraction of the size.
    pub center_jitter_frac: f64,
}

impl Default for BodyMaskConfig {
    fn default() -> Self {
        BodyMaskConfig {
            enabled: true,
            max_side_frac: 0.3,
            center_jitter_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeypointMaskConfig {
    pub enabled: bool,
    pub patch_size_px: u32,
    pub max_keypoints: usize,
}

impl Default for KeypointMaskConfig {
    fn default() -> Self {
        KeypointMaskConfig {
            enabled: false,
            patch_size_px: 16,
            max_keypoints: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub input_size: usize,
    pub scale_range: (f64, f64),
    pub rotation_deg: f64,
    pub flip_prob: f64,
    pub permute_channels: bool,
    pub fill_color: [u8; 3],
    pub body_mask: BodyMaskConfig,
    pub keypoint_mask: KeypointMaskConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            input_size: 256,
            scale_range: (0.75, 1.25),
            rotation_deg: 40.0,
            flip_prob: 0.5,
            permute_channels: true,
            fill_color: [128, 128, 128],
            body_mask: BodyMaskConfig::default(),
            keypoint_mask: KeypointMaskConfig::default(),
        }
    }
}

impl AugmentConfig {
    /// The ±30° rotation profile.
    pub fn mpii() -> Self {
        AugmentConfig {
            rotation_deg: 30.0,
            ..AugmentConfig::default()
        }
    }

    /// Identity profile: letterboxing only, no randomness.
    pub fn disabled() -> Self {
        AugmentConfig {
            scale_range: (1.0, 1.0),
            rotation_deg: 0.0,
            flip_prob: 0.0,
            permute_channels: false,
            body_mask: BodyMaskConfig {
                enabled: false,
                ..BodyMaskConfig::default()
            },
            keypoint_mask: KeypointMaskConfig {
                enabled: false,
                ..KeypointMaskConfig::default()
            },
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.scale_range.0 > self.scale_range.1 || self.scale_range.0 <= 0.0 {
            return Err(format!("scale_range must be ordered and positive, got {:?}", self.scale_range));
        }
        if !(self.body_mask.max_side_frac > 0.0 && self.body_mask.max_side_frac <= 1.0) {
            return Err(format!(
                "body_mask.max_side_frac must be in (0, 1], got {}",
                self.body_mask.max_side_frac
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(format!("flip_prob must be in [0, 1], got {}", self.flip_prob));
        }
        Ok(())
    }
}

/// One training sample: an image and its annotated keypoints.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    pub keypoints: KeypointSet,
}

/// Scale/rotate/flip about the image center, letterboxed onto an
/// `input_size` canvas. Keypoints ride the same affine map (flips also swap
/// left/right indices); points leaving the canvas are marked occluded.
pub fn geometric_augment(sample: &Sample, rng: &mut impl Rng, cfg: &AugmentConfig) -> Sample {
    let u = if cfg.scale_range.0 == cfg.scale_range.1 {
        cfg.scale_range.0
    } else {
        rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1)
    };
    let theta = if cfg.rotation_deg == 0.0 {
        0.0
    } else {
        rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
    };
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);

    let (sw, sh) = sample.image.dimensions();
    let target = cfg.input_size as u32;
    let base = target as f64 / sw.max(sh) as f64;
    let center_src = Affine::translation(-((sw as f64 - 1.0) / 2.0), -((sh as f64 - 1.0) / 2.0));
    let mut map = center_src;
    if flip {
        map = Affine {
            m: [[-1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
        .compose(&map);
    }
    map = Affine::rotation(theta)
        .compose(&Affine::scaling(base * u))
        .compose(&map);
    map = Affine::translation((target as f64 - 1.0) / 2.0, (target as f64 - 1.0) / 2.0).compose(&map);

    let image = warp_affine(&sample.image, &map, target, target, cfg.fill_color);

    let mut points = sample.keypoints.points;
    if flip {
        for &(l, r) in &crate::codec::FLIP_PAIRS {
            points.swap(l, r);
        }
    }
    let mut out_points = [Keypoint::absent(); crate::codec::NUM_KEYPOINTS];
    let bound = target as f64 - 1.0;
    for (dst, src) in out_points.iter_mut().zip(&points) {
        if !src.visibility.is_annotated() {
            continue;
        }
        let (x, y) = map.apply(src.x, src.y);
        let visibility = if x < 0.0 || y < 0.0 || x > bound || y > bound {
            Visibility::Occluded
        } else {
            src.visibility
        };
        *dst = Keypoint { x, y, visibility };
    }
    Sample {
        image,
        keypoints: KeypointSet {
            points: out_points,
            head_size: sample.keypoints.head_size * base * u,
        },
    }
}

/// Draws one rotated rectangle of uniform random color near the image
/// center. Sides are sampled below the configured bound; only covered pixels
/// change. Returns the masked image and the covered pixel count.
pub fn body_mask(image: &RgbImage, rng: &mut impl Rng, cfg: &AugmentConfig) -> (RgbImage, usize) {
    let size = cfg.input_size as f64;
    // Rasterization can cover up to (side+1) pixel centers per axis, so keep
    // sampled sides two pixels under the bound.
    let max_side = (cfg.body_mask.max_side_frac * size - 2.0).max(4.0);
    let w = rng.gen_range(4.0..=max_side);
    let h = rng.gen_range(4.0..=max_side);
    let jitter = cfg.body_mask.center_jitter_frac * size;
    let cx = (size - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter);
    let cy = (size - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let color = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
    let mut out = image.clone();
    let covered = fill_rotated_rect(&mut out, (cx, cy), w, h, angle, color);
    (out, covered.len())
}

/// Covers up to `max_keypoints` randomly chosen visible keypoints with
/// fixed-color square patches. Annotations are left untouched, so the
/// supervision still expects the joint.
pub fn keypoint_mask(sample: &Sample, rng: &mut impl Rng, cfg: &AugmentConfig) -> Sample {
    let visible: Vec<usize> = sample
        .keypoints
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.visibility == Visibility::Visible)
        .map(|(i, _)| i)
        .collect();
    let take = cfg.keypoint_mask.max_keypoints.min(visible.len());
    // Partial Fisher-Yates over the visible indices.
    let mut pool = visible;
    let mut chosen = Vec::with_capacity(take);
    for _ in 0..take {
        let at = rng.gen_range(0..pool.len());
        chosen.push(pool.swap_remove(at));
    }

    let mut image = sample.image.clone();
    let half = cfg.keypoint_mask.patch_size_px as i64 / 2;
    for &k in &chosen {
        let p = &sample.keypoints.points[k];
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for y in cy - half..cy - half + cfg.keypoint_mask.patch_size_px as i64 {
            for x in cx - half..cx - half + cfg.keypoint_mask.patch_size_px as i64 {
                if x >= 0 && y >= 0 && (x as u32) < image.width() && (y as u32) < image.height() {
                    image.put_pixel(x as u32, y as u32, image::Rgb(cfg.fill_color));
                }
            }
        }
    }
    Sample {
        image,
        keypoints: sample.keypoints.clone(),
    }
}

/// Reorders the three color planes by a uniformly random permutation.
pub fn channel_permute(image: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let perm = PERMS[rng.gen_range(0..PERMS.len())];
    let mut out = image.clone();
    for (x, y, pixel) in image.enumerate_pixels() {
        let src = pixel.0;
        out.put_pixel(x, y, image::Rgb([src[perm[0]], src[perm[1]], src[perm[2]]]));
    }
    out
}

/// The full training-time pipeline in a fixed draw order.
pub fn augment_sample(sample: &Sample, rng: &mut impl Rng, cfg: &AugmentConfig) -> Sample {
    let mut out = geometric_augment(sample, rng, cfg);
    if cfg.body_mask.enabled {
        let (image, _) = body_mask(&out.image, rng, cfg);
        out.image = image;
    }
    if cfg.keypoint_mask.enabled {
        out = keypoint_mask(&out, rng, cfg);
    }
    if cfg.permute_channels {
        out.image = channel_permute(&out.image, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_sample(size: u32) -> Sample {
        let mut image = RgbImage::from_pixel(size, size, image::Rgb([30, 60, 90]));
        let mut kps = KeypointSet::all_absent();
        kps.head_size = 24.0;
        for (i, p) in kps.points.iter_mut().enumerate() {
            let x = 40.0 + (i % 4) as f64 * 40.0;
            let y = 40.0 + (i / 4) as f64 * 40.0;
            *p = Keypoint {
                x,
                y,
                visibility: Visibility::Visible,
            };
            crate::img::draw_disc(&mut image, x, y, 3.0, [200, 200, 200]);
        }
        Sample {
            image,
            keypoints: kps,
        }
    }

    #[test]
    fn identity_profile_keeps_keypoints() {
        let sample = test_sample(256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig::disabled();
        let out = geometric_augment(&sample, &mut rng, &cfg);
        for (a, b) in out.keypoints.points.iter().zip(&sample.keypoints.points) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
    }

    #[test]
    fn double_flip_restores_indices() {
        let sample = test_sample(256);
        let mut cfg = AugmentConfig::disabled();
        cfg.flip_prob = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = geometric_augment(&sample, &mut rng, &cfg);
        let twice = geometric_augment(&once, &mut rng, &cfg);
        for (a, b) in twice.keypoints.points.iter().zip(&sample.keypoints.points) {
            assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
        }
    }

    #[test]
    fn pairwise_distances_scale_by_u() {
        let sample = test_sample(256);
        let mut cfg = AugmentConfig::default();
        cfg.scale_range = (0.75, 0.75);
        cfg.flip_prob = 0.0; // flips relabel left/right indices
        cfg.body_mask.enabled = false;
        cfg.permute_channels = false;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = geometric_augment(&sample, &mut rng, &cfg);
        let p = &sample.keypoints.points;
        let q = &out.keypoints.points;
        for i in 0..16 {
            for j in (i + 1)..16 {
                let before = ((p[i].x - p[j].x).powi(2) + (p[i].y - p[j].y).powi(2)).sqrt();
                let after = ((q[i].x - q[j].x).powi(2) + (q[i].y - q[j].y).powi(2)).sqrt();
                let rel = (after - before * 0.75).abs() / (before * 0.75);
                assert!(rel < 1e-6, "distance drift {rel}");
            }
        }
    }

    #[test]
    fn quarter_scale_halves_subject_height() {
        // 256-tall subject scaled by 0.75 spans 192.
        let sample = test_sample(256);
        let mut cfg = AugmentConfig::disabled();
        cfg.scale_range = (0.75, 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = geometric_augment(&sample, &mut rng, &cfg);
        let ys: Vec<f64> = out.keypoints.points.iter().map(|p| p.y).collect();
        let span_before = 120.0; // keypoints span rows 40..160
        let span_after = ys.iter().cloned().fold(f64::MIN, f64::max)
            - ys.iter().cloned().fold(f64::MAX, f64::min);
        assert!((span_after - span_before * 0.75).abs() < 1e-6);
    }

    #[test]
    fn body_mask_is_one_uniform_color_and_local() {
        let sample = test_sample(256);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (masked, count) = body_mask(&sample.image, &mut rng, &cfg);
        let bound = (0.3 * 256.0) * (0.3 * 256.0);
        assert!(count > 0 && (count as f64) <= bound, "count {count}");
        let mut colors = std::collections::HashSet::new();
        let mut changed = 0;
        for (x, y, px) in masked.enumerate_pixels() {
            if px != sample.image.get_pixel(x, y) {
                changed += 1;
                colors.insert(px.0);
            }
        }
        assert_eq!(changed, count);
        assert_eq!(colors.len(), 1);
    }

    #[test]
    fn keypoint_mask_keeps_annotations_and_centers_patches() {
        let sample = test_sample(256);
        let mut cfg = AugmentConfig::default();
        cfg.keypoint_mask.enabled = true;
        cfg.keypoint_mask.max_keypoints = 4;
        cfg.keypoint_mask.patch_size_px = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = keypoint_mask(&sample, &mut rng, &cfg);
        for (a, b) in out.keypoints.points.iter().zip(&sample.keypoints.points) {
            assert_eq!((a.x, a.y, a.visibility), (b.x, b.y, b.visibility));
        }
        // Any masked pixel lies within a patch radius of some keypoint.
        for (x, y, px) in out.image.enumerate_pixels() {
            if px != sample.image.get_pixel(x, y) {
                assert_eq!(px.0, cfg.fill_color);
                let near = sample.keypoints.points.iter().any(|p| {
                    (x as f64 - p.x).abs() <= 5.0 && (y as f64 - p.y).abs() <= 5.0
                });
                assert!(near, "stray masked pixel at ({x},{y})");
            }
        }
    }

    #[test]
    fn zero_keypoint_mask_changes_nothing() {
        let sample = test_sample(64);
        let mut cfg = AugmentConfig::default();
        cfg.keypoint_mask.enabled = true;
        cfg.keypoint_mask.max_keypoints = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = keypoint_mask(&sample, &mut rng, &cfg);
        assert_eq!(out.image.as_raw(), sample.image.as_raw());
    }

    #[test]
    fn grayscale_image_survives_any_permutation() {
        let image = RgbImage::from_pixel(16, 16, image::Rgb([77, 77, 77]));
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = channel_permute(&image, &mut rng);
            assert_eq!(out.as_raw(), image.as_raw());
        }
    }

    #[test]
    fn permutation_is_invertible() {
        let mut image = RgbImage::new(4, 4);
        for (i, px) in image.pixels_mut().enumerate() {
            *px = image::Rgb([i as u8, (i * 3) as u8, (i * 7) as u8]);
        }
        // Collect every permuted variant; applying the permutation that maps
        // back must restore the original.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let permuted = channel_permute(&image, &mut rng);
        let mut restored = None;
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let candidate = channel_permute(&permuted, &mut rng);
            if candidate.as_raw() == image.as_raw() {
                restored = Some(seed);
                break;
            }
        }
        assert!(restored.is_some(), "no inverse permutation found");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let sample = test_sample(256);
        let mut cfg = AugmentConfig::default();
        cfg.keypoint_mask.enabled = true;
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_sample(&sample, &mut rng, &cfg)
        };
        let a = run(123);
        let b = run(123);
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        for (pa, pb) in a.keypoints.points.iter().zip(&b.keypoints.points) {
            assert_eq!((pa.x, pa.y, pa.visibility), (pb.x, pb.y, pb.visibility));
        }
        let c = run(124);
        assert_ne!(a.image.as_raw(), c.image.as_raw());
    }
}
