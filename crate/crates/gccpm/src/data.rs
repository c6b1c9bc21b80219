//! Synthetic stick-figure dataset generation, annotation ingestion and
//! dataset persistence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::Sample;
use crate::codec::{Keypoint, KeypointSet, Visibility, NUM_KEYPOINTS};
use crate::img::{draw_disc, draw_segment, RgbImage};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("annotation parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("record {index} ({image}): {message}")]
    Schema {
        index: usize,
        image: String,
        message: String,
    },
}

/// Joint index layout used by the renderer (matches the codec order).
mod joints {
    pub const R_ANKLE: usize = 0;
    pub const R_KNEE: usize = 1;
    pub const R_HIP: usize = 2;
    pub const L_HIP: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const L_ANKLE: usize = 5;
    pub const PELVIS: usize = 6;
    pub const THORAX: usize = 7;
    pub const NECK: usize = 8;
    pub const HEAD_TOP: usize = 9;
    pub const R_WRIST: usize = 10;
    pub const R_ELBOW: usize = 11;
    pub const R_SHOULDER: usize = 12;
    pub const L_SHOULDER: usize = 13;
    pub const L_ELBOW: usize = 14;
    pub const L_WRIST: usize = 15;
}

/// Bone length ranges as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoneRanges {
    pub spine: (f64, f64),
    pub neck: (f64, f64),
    pub head: (f64, f64),
    pub hip_halfwidth: (f64, f64),
    pub thigh: (f64, f64),
    pub shin: (f64, f64),
    pub shoulder_halfwidth: (f64, f64),
    pub upper_arm: (f64, f64),
    pub forearm: (f64, f64),
}

impl Default for BoneRanges {
    fn default() -> Self {
        BoneRanges {
            spine: (0.14, 0.18),
            neck: (0.04, 0.06),
            head: (0.07, 0.10),
            hip_halfwidth: (0.04, 0.07),
            thigh: (0.10, 0.14),
            shin: (0.10, 0.14),
            shoulder_halfwidth: (0.06, 0.09),
            upper_arm: (0.08, 0.12),
            forearm: (0.08, 0.12),
        }
    }
}

/// Joint angle ranges in radians (symmetric around the rest pose).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleRanges {
    pub lean: f64,
    pub thigh: f64,
    pub shin: f64,
    pub arm: f64,
    pub forearm: f64,
}

impl Default for AngleRanges {
    fn default() -> Self {
        AngleRanges {
            lean: 0.25,
            thigh: 0.5,
            shin: 0.4,
            arm: 1.0,
            forearm: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Background {
    Solid { color: [u8; 3] },
    Noise,
    MultiFigure { count: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub limb_thickness: (f64, f64),
    pub bones: BoneRanges,
    pub angles: AngleRanges,
    pub background: Background,
    /// When set, skeleton joints snap to this grid before rendering, so
    /// annotations are exactly grid-aligned.
    pub snap_to_grid: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 256,
            limb_thickness: (2.0, 4.0),
            bones: BoneRanges::default(),
            angles: AngleRanges::default(),
            background: Background::Solid { color: [16, 16, 24] },
            snap_to_grid: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.image_size < 16 {
            return Err(format!("image_size {} too small", self.image_size));
        }
        let ranges = [
            self.bones.spine,
            self.bones.neck,
            self.bones.head,
            self.bones.hip_halfwidth,
            self.bones.thigh,
            self.bones.shin,
            self.bones.shoulder_halfwidth,
            self.bones.upper_arm,
            self.bones.forearm,
        ];
        for (lo, hi) in ranges {
            if !(lo > 0.0 && hi >= lo) {
                return Err(format!("bone range ({lo}, {hi}) must be ordered and positive"));
            }
        }
        Ok(())
    }
}

const LEFT_COLOR: [u8; 3] = [80, 200, 110];
const RIGHT_COLOR: [u8; 3] = [210, 90, 80];
const CENTER_COLOR: [u8; 3] = [225, 225, 225];

struct Figure {
    joints: [(f64, f64); NUM_KEYPOINTS],
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Articulated 16-joint pose around `center`; `scale` multiplies every bone.
fn sample_figure(rng: &mut impl Rng, cfg: &SynthConfig, center: (f64, f64), scale: f64) -> Figure {
    use joints::*;
    use std::f64::consts::FRAC_PI_2;
    let s = cfg.image_size as f64 * scale;
    let b = &cfg.bones;
    let a = &cfg.angles;

    let mut j = [(0.0, 0.0); NUM_KEYPOINTS];
    let polar = |origin: (f64, f64), len: f64, angle: f64| {
        (origin.0 + len * angle.cos(), origin.1 + len * angle.sin())
    };

    j[PELVIS] = center;
    let up = -FRAC_PI_2 + rng.gen_range(-a.lean..=a.lean);
    j[THORAX] = polar(j[PELVIS], sample_range(rng, b.spine) * s, up);
    j[NECK] = polar(j[THORAX], sample_range(rng, b.neck) * s, up);
    j[HEAD_TOP] = polar(j[NECK], sample_range(rng, b.head) * s, up);

    let right = up + FRAC_PI_2;
    let hip_w = sample_range(rng, b.hip_halfwidth) * s;
    j[R_HIP] = polar(j[PELVIS], hip_w, right);
    j[L_HIP] = polar(j[PELVIS], hip_w, right + std::f64::consts::PI);
    let should_w = sample_range(rng, b.shoulder_halfwidth) * s;
    j[R_SHOULDER] = polar(j[THORAX], should_w, right);
    j[L_SHOULDER] = polar(j[THORAX], should_w, right + std::f64::consts::PI);

    let down = FRAC_PI_2;
    for (hip, knee, ankle) in [(R_HIP, R_KNEE, R_ANKLE), (L_HIP, L_KNEE, L_ANKLE)] {
        let thigh_angle = down + rng.gen_range(-a.thigh..=a.thigh);
        j[knee] = polar(j[hip], sample_range(rng, b.thigh) * s, thigh_angle);
        let shin_angle = thigh_angle + rng.gen_range(-a.shin..=a.shin);
        j[ankle] = polar(j[knee], sample_range(rng, b.shin) * s, shin_angle);
    }
    for (shoulder, elbow, wrist) in [(R_SHOULDER, R_ELBOW, R_WRIST), (L_SHOULDER, L_ELBOW, L_WRIST)] {
        let arm_angle = down + rng.gen_range(-a.arm..=a.arm);
        j[elbow] = polar(j[shoulder], sample_range(rng, b.upper_arm) * s, arm_angle);
        let forearm_angle = arm_angle + rng.gen_range(-a.forearm..=a.forearm);
        j[wrist] = polar(j[elbow], sample_range(rng, b.forearm) * s, forearm_angle);
    }
    Figure { joints: j }
}

fn figure_fits(figure: &Figure, size: f64) -> bool {
    let margin = size * 0.05;
    figure
        .joints
        .iter()
        .all(|&(x, y)| x >= margin && y >= margin && x <= size - margin && y <= size - margin)
}

fn draw_figure(img: &mut RgbImage, figure: &Figure, thickness: f64) {
    use joints::*;
    let bones: [(usize, usize, [u8; 3]); 14] = [
        (PELVIS, THORAX, CENTER_COLOR),
        (THORAX, NECK, CENTER_COLOR),
        (PELVIS, R_HIP, RIGHT_COLOR),
        (PELVIS, L_HIP, LEFT_COLOR),
        (R_HIP, R_KNEE, RIGHT_COLOR),
        (R_KNEE, R_ANKLE, RIGHT_COLOR),
        (L_HIP, L_KNEE, LEFT_COLOR),
        (L_KNEE, L_ANKLE, LEFT_COLOR),
        (THORAX, R_SHOULDER, RIGHT_COLOR),
        (THORAX, L_SHOULDER, LEFT_COLOR),
        (R_SHOULDER, R_ELBOW, RIGHT_COLOR),
        (R_ELBOW, R_WRIST, RIGHT_COLOR),
        (L_SHOULDER, L_ELBOW, LEFT_COLOR),
        (L_ELBOW, L_WRIST, LEFT_COLOR),
    ];
    for (a, b, color) in bones {
        draw_segment(img, figure.joints[a], figure.joints[b], thickness, color);
    }
    // Head disc between neck and head top.
    let neck = figure.joints[NECK];
    let top = figure.joints[HEAD_TOP];
    let center = ((neck.0 + top.0) / 2.0, (neck.1 + top.1) / 2.0);
    let radius = ((top.0 - neck.0).powi(2) + (top.1 - neck.1).powi(2)).sqrt() / 2.0;
    draw_disc(img, center.0, center.1, radius.max(2.0), CENTER_COLOR);
}

/// Renders one sample: randomized articulated stick figure (left limbs in a
/// distinguishable shade from right limbs), exact keypoints, and
/// `head_size = 2 × head-top-to-neck distance`. Multi-figure backgrounds draw
/// distractors first; the annotation belongs to the figure whose pelvis is
/// nearest the image center.
pub fn gen_synthetic(rng: &mut impl Rng, cfg: &SynthConfig) -> Sample {
    let size = cfg.image_size as f64;
    let center = (size / 2.0, size / 2.0);

    let mut image = match cfg.background {
        Background::Solid { color } => RgbImage::from_pixel(
            cfg.image_size as u32,
            cfg.image_size as u32,
            image::Rgb(color),
        ),
        Background::Noise | Background::MultiFigure { .. } => {
            let mut img = RgbImage::new(cfg.image_size as u32, cfg.image_size as u32);
            for px in img.pixels_mut() {
                let v: u8 = rng.gen_range(0..48);
                *px = image::Rgb([v, v, v.saturating_add(8)]);
            }
            img
        }
    };

    fn sample_fitting<R: Rng>(
        rng: &mut R,
        cfg: &SynthConfig,
        size: f64,
        center: (f64, f64),
        scale: f64,
    ) -> Figure {
        for _ in 0..64 {
            let jitter = size * 0.04;
            let c = (
                center.0 + rng.gen_range(-jitter..=jitter),
                center.1 + rng.gen_range(-jitter..=jitter),
            );
            let figure = sample_figure(rng, cfg, c, scale);
            if figure_fits(&figure, size) {
                return figure;
            }
        }
        // Fallback: a centered, margin-respecting rest pose.
        let rest = SynthConfig {
            angles: AngleRanges {
                lean: 0.0,
                thigh: 0.0,
                shin: 0.0,
                arm: 0.0,
                forearm: 0.0,
            },
            ..cfg.clone()
        };
        sample_figure(rng, &rest, center, scale)
    }

    let mut figures = Vec::new();
    if let Background::MultiFigure { count } = cfg.background {
        for i in 1..count {
            // Distractors sit toward the corners.
            let angle = i as f64 * 2.4;
            let offset = size * 0.33;
            let c = (
                (center.0 + offset * angle.cos()).clamp(size * 0.25, size * 0.75),
                (center.1 + offset * angle.sin()).clamp(size * 0.25, size * 0.75),
            );
            figures.push(sample_fitting(rng, cfg, size, c, 0.7));
        }
    }
    let mut main = sample_fitting(rng, cfg, size, center, 1.0);
    if let Some(grid) = cfg.snap_to_grid {
        let g = grid as f64;
        for p in main.joints.iter_mut() {
            p.0 = (p.0 / g).round() * g;
            p.1 = (p.1 / g).round() * g;
        }
    }
    figures.push(main);

    // The annotated figure is the one with the most central pelvis; draw it
    // last so it occludes distractors.
    let annotated = figures
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let da = (a.joints[joints::PELVIS].0 - center.0).powi(2)
                + (a.joints[joints::PELVIS].1 - center.1).powi(2);
            let db = (b.joints[joints::PELVIS].0 - center.0).powi(2)
                + (b.joints[joints::PELVIS].1 - center.1).powi(2);
            da.partial_cmp(&db).expect("finite distances")
        })
        .map(|(i, _)| i)
        .expect("at least one figure");
    let thickness = sample_range(rng, cfg.limb_thickness);
    for (i, figure) in figures.iter().enumerate() {
        if i != annotated {
            draw_figure(&mut image, figure, thickness);
        }
    }
    draw_figure(&mut image, &figures[annotated], thickness);

    let joints = figures[annotated].joints;
    let neck = joints[joints::NECK];
    let top = joints[joints::HEAD_TOP];
    let head_size = 2.0 * ((top.0 - neck.0).powi(2) + (top.1 - neck.1).powi(2)).sqrt();
    let mut points = [Keypoint::absent(); NUM_KEYPOINTS];
    for (p, &(x, y)) in points.iter_mut().zip(&joints) {
        *p = Keypoint {
            x,
            y,
            visibility: Visibility::Visible,
        };
    }
    Sample {
        image,
        keypoints: KeypointSet { points, head_size },
    }
}

/// Samples with content determined by (seed, index) only, so generation can
/// be split across workers without changing the dataset.
pub fn gen_dataset(cfg: &SynthConfig, count: usize) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            gen_synthetic(&mut rng, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AnnotationKeypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

/// One annotation row: image path, 16 keypoints with visibility codes
/// (0 absent, 1 occluded, 2 visible), and the head size in pixels.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub keypoints: Vec<AnnotationKeypoint>,
    pub head_size: f64,
}

impl AnnotationRecord {
    pub fn from_keypoints(image: String, kps: &KeypointSet) -> Self {
        AnnotationRecord {
            image,
            keypoints: kps
                .points
                .iter()
                .map(|p| AnnotationKeypoint {
                    x: p.x,
                    y: p.y,
                    v: p.visibility.code(),
                })
                .collect(),
            head_size: kps.head_size,
        }
    }

    /// Keypoints with coordinates clamped into the image bounds.
    pub fn to_keypoints(&self, image_w: f64, image_h: f64) -> KeypointSet {
        let mut points = [Keypoint::absent(); NUM_KEYPOINTS];
        for (p, k) in points.iter_mut().zip(&self.keypoints) {
            let visibility = Visibility::from_code(k.v).unwrap_or(Visibility::Absent);
            *p = Keypoint {
                x: k.x.clamp(0.0, image_w - 1.0),
                y: k.y.clamp(0.0, image_h - 1.0),
                visibility,
            };
        }
        KeypointSet {
            points,
            head_size: self.head_size,
        }
    }
}

/// The validator applied to every ingested (and generated) record.
pub fn validate_record(index: usize, record: &AnnotationRecord) -> Result<(), DataError> {
    let fail = |message: String| DataError::Schema {
        index,
        image: record.image.clone(),
        message,
    };
    if record.keypoints.len() != NUM_KEYPOINTS {
        return Err(fail(format!(
            "expected {NUM_KEYPOINTS} keypoints, found {}",
            record.keypoints.len()
        )));
    }
    for (i, k) in record.keypoints.iter().enumerate() {
        if Visibility::from_code(k.v).is_none() {
            return Err(fail(format!("keypoint {i} has invalid visibility code {}", k.v)));
        }
        if !k.x.is_finite() || !k.y.is_finite() {
            return Err(fail(format!("keypoint {i} has non-finite coordinates")));
        }
    }
    if !(record.head_size > 0.0) {
        return Err(fail(format!("head_size must be positive, got {}", record.head_size)));
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads and validates an annotation document (a JSON list of records).
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let records: Vec<AnnotationRecord> = serde_json::from_reader(std::io::BufReader::new(file))?;
    for (index, record) in records.iter().enumerate() {
        validate_record(index, record)?;
    }
    Ok(records)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), records)?;
    Ok(())
}

/// Writes samples as PNGs plus an annotation document into `dir`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        let path = dir.join(&name);
        sample.image.save(&path).map_err(|source| DataError::Image {
            path: path.display().to_string(),
            source,
        })?;
        records.push(AnnotationRecord::from_keypoints(name, &sample.keypoints));
    }
    save_annotations(&dir.join(ANNOTATIONS_FILE), &records)
}

/// Loads a dataset directory written by [`save_dataset`] (or hand-authored
/// in the same schema).
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DataError> {
    let records = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let mut samples = Vec::with_capacity(records.len());
    for record in &records {
        let path = dir.join(&record.image);
        let image = image::open(&path)
            .map_err(|source| DataError::Image {
                path: path.display().to_string(),
                source,
            })?
            .into_rgb8();
        let keypoints = record.to_keypoints(image.width() as f64, image.height() as f64);
        samples.push(Sample { image, keypoints });
    }
    Ok(samples)
}
