//! End-to-end training loop and evaluation runs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_sample, geometric_augment, AugmentConfig, Sample};
use crate::codec::{encode_heatmaps, CodecConfig, DecodedPose, KeypointSet};
use crate::metrics::{pckh, stage_loss, EvalResult, MetricsError};
use crate::model::{build_model, save_checkpoint, CheckpointError, Model, ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}; first bad layer: {layer}")]
    NonFinite { iteration: usize, layer: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub max_lr_decays: usize,
    /// Evaluations without >0.1% relative improvement before an lr decay.
    pub plateau_patience: usize,
    pub plateau_min_rel_improvement: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// Filled in from the top-level augmentation section, not from [train].
    #[serde(skip)]
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-5,
            lr_decay_factor: 10.0,
            max_lr_decays: 2,
            plateau_patience: 5,
            plateau_min_rel_improvement: 1e-3,
            batch_size: 8,
            max_iters: 2000,
            eval_interval: 100,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size and eval_interval must be positive".into(),
            ));
        }
        self.augment.validate().map_err(TrainError::InvalidConfig)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mean_pckh: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub entries: Vec<HistoryEntry>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("iteration,train_loss,val_loss,mean_pckh,lr\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.6},{:.9}",
                e.iteration, e.train_loss, e.val_loss, e.mean_pckh, e.lr
            );
        }
        out
    }
}

fn codec_for(model_cfg: &ModelConfig, sigma: f64) -> CodecConfig {
    CodecConfig {
        heatmap_size: model_cfg.heatmap_size,
        output_stride: model_cfg.output_stride,
        sigma,
        ..CodecConfig::default()
    }
}

/// Ground-truth stack and per-channel weights for a batch of samples
/// (letterboxed to the model input already).
fn batch_targets<T: Scalar>(
    samples: &[&Sample],
    model_cfg: &ModelConfig,
    codec_cfg: &CodecConfig,
) -> Result<(Tensor<T>, Tensor<T>, Vec<f64>), TrainError> {
    let k = model_cfg.heatmap_channels();
    let h = model_cfg.heatmap_size;
    let mut gt = Vec::with_capacity(samples.len() * k * h * h);
    let mut weights = Vec::with_capacity(samples.len() * k);
    let images: Vec<&crate::img::RgbImage> = samples.iter().map(|s| &s.image).collect();
    let batch = crate::img::images_to_tensor::<T>(&images)?;
    for sample in samples {
        let maps = encode_heatmaps::<T>(&sample.keypoints, codec_cfg)?;
        gt.extend_from_slice(&maps.data()[..]);
        for p in &sample.keypoints.points {
            weights.push(if p.visibility.is_annotated() { 1.0 } else { 0.0 });
        }
        if model_cfg.include_background_map {
            // Background channel: 1 - max over keypoint channels.
            let plane = h * h;
            let start = gt.len() - crate::codec::NUM_KEYPOINTS * plane;
            let mut bg = vec![T::one(); plane];
            for c in 0..crate::codec::NUM_KEYPOINTS {
                for (i, b) in bg.iter_mut().enumerate() {
                    let v = gt[start + c * plane + i];
                    if T::one() - v < *b {
                        *b = T::one() - v;
                    }
                }
            }
            gt.extend_from_slice(&bg);
            weights.push(1.0);
        }
    }
    let gt = Tensor::from_vec(vec![samples.len(), k, h, h], gt)?;
    Ok((batch, gt, weights))
}

/// Trains a freshly built model on the dataset. Checkpoints (`best/`,
/// `final/`) are persisted under `checkpoint_dir` when given.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &[Sample],
    sigma: f64,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model<f32>, TrainHistory), TrainError> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let codec_cfg = codec_for(model_cfg, sigma);
    let mut model = build_model::<f32>(model_cfg, train_cfg.seed)?;
    let mut history = TrainHistory::default();
    if train_cfg.max_iters == 0 {
        return Ok((model, history));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    shuffle_rng.set_stream(101);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    augment_rng.set_stream(102);

    // Identity-letterboxed copies for loss/accuracy evaluation.
    let eval_samples = letterboxed(dataset, train_cfg.augment.input_size, train_cfg.augment.fill_color);

    let mut adam_cfg = AdamConfig::with_lr(train_cfg.lr);
    let mut state = AdamState::new(&model.parameters());
    let mut order: Vec<usize> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut stale_evals = 0usize;
    let mut decays = 0usize;
    let mut running_loss = 0.0;
    let mut running_count = 0usize;

    for iteration in 1..=train_cfg.max_iters {
        let mut picks = Vec::with_capacity(train_cfg.batch_size);
        for _ in 0..train_cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut shuffle_rng);
            }
            picks.push(order.pop().expect("refilled above"));
        }
        let augmented: Vec<Sample> = picks
            .iter()
            .map(|&i| augment_sample(&dataset[i], &mut augment_rng, &train_cfg.augment))
            .collect();
        let refs: Vec<&Sample> = augmented.iter().collect();
        let (batch, gt, weights) = batch_targets::<f32>(&refs, model_cfg, &codec_cfg)?;

        let stages = model.forward(&batch)?;
        let loss = stage_loss(&stages, &gt, &weights)?;
        let loss_value = loss.data()[0] as f64;
        if !loss_value.is_finite() {
            let layer = model
                .first_non_finite_layer(&batch)?
                .unwrap_or_else(|| "loss".into());
            return Err(TrainError::NonFinite { iteration, layer });
        }
        running_loss += loss_value;
        running_count += 1;

        loss.backward()?;
        let mut params = model.parameters();
        adam_step(&mut params, &mut state, &adam_cfg)?;
        for (slot, new) in model.parameters_mut().into_iter().zip(params) {
            *slot = new;
        }

        if iteration % train_cfg.eval_interval == 0 || iteration == train_cfg.max_iters {
            let (val_loss, mean_pckh) = quick_eval(&model, &eval_samples, model_cfg, &codec_cfg)?;
            let train_loss = running_loss / running_count.max(1) as f64;
            running_loss = 0.0;
            running_count = 0;
            history.entries.push(HistoryEntry {
                iteration,
                train_loss,
                val_loss,
                mean_pckh,
                lr: adam_cfg.lr,
            });

            if val_loss < best_val * (1.0 - train_cfg.plateau_min_rel_improvement) {
                best_val = val_loss;
                stale_evals = 0;
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(&model, &dir.join("best"))?;
                }
            } else {
                stale_evals += 1;
                if stale_evals >= train_cfg.plateau_patience && decays < train_cfg.max_lr_decays {
                    adam_cfg.lr /= train_cfg.lr_decay_factor;
                    decays += 1;
                    stale_evals = 0;
                }
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&model, &dir.join("final"))?;
    }
    Ok((model, history))
}

/// Identity letterbox of every sample onto the model input canvas.
pub fn letterboxed(dataset: &[Sample], input_size: usize, fill: [u8; 3]) -> Vec<Sample> {
    let cfg = AugmentConfig {
        input_size,
        fill_color: fill,
        ..AugmentConfig::disabled()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    dataset
        .iter()
        .map(|s| geometric_augment(s, &mut rng, &cfg))
        .collect()
}

fn quick_eval(
    model: &Model<f32>,
    eval_samples: &[Sample],
    model_cfg: &ModelConfig,
    codec_cfg: &CodecConfig,
) -> Result<(f64, f64), TrainError> {
    crate::tensor::no_grad(|| {
        let mut loss_total = 0.0;
        let mut poses: Vec<DecodedPose> = Vec::with_capacity(eval_samples.len());
        let mut gts: Vec<KeypointSet> = Vec::with_capacity(eval_samples.len());
        for sample in eval_samples {
            let refs = [sample];
            let (batch, gt, weights) = batch_targets::<f32>(&refs, model_cfg, codec_cfg)?;
            let stages = model.forward(&batch)?;
            loss_total += stage_loss(&stages, &gt, &weights)?.data()[0] as f64;
            let final_maps = stages.last().expect("at least one stage");
            let maps = Tensor::from_vec(
                vec![
                    model_cfg.heatmap_channels(),
                    model_cfg.heatmap_size,
                    model_cfg.heatmap_size,
                ],
                final_maps.data().to_vec(),
            )?;
            let decoded = crate::codec::decode_heatmaps(&maps, codec_cfg)?;
            poses.push(decoded);
            gts.push(sample.keypoints.clone());
        }
        let result = pckh(&poses, &gts, 0.5)?;
        Ok((loss_total / eval_samples.len() as f64, result.mean_pckh))
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub use_flip: bool,
    pub scales: Vec<f64>,
    pub fill: [u8; 3],
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            use_flip: false,
            scales: vec![1.0],
            fill: [128, 128, 128],
            sigma: 2.0,
            alpha: 0.5,
        }
    }
}

/// Decodes (optionally flip- and multi-scale-averaged) final-stage heatmaps
/// for the whole dataset and scores them.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &[Sample],
    opts: &EvalOptions,
) -> Result<EvalResult, TrainError> {
    let model_cfg = match &model.descriptor {
        crate::model::ModelDescriptor::Network { config } => config.clone(),
        other => {
            return Err(TrainError::InvalidConfig(format!(
                "evaluation needs a network model, got {other:?}"
            )))
        }
    };
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let codec_cfg = codec_for(&model_cfg, opts.sigma);
    let eval_samples = letterboxed(dataset, model_cfg.input_size, opts.fill);

    crate::tensor::no_grad(|| {
        let forward_last = |x: &Tensor<f32>| -> Result<Tensor<f32>, TensorError> {
            let stages = model.forward(x).map_err(|e| TensorError::InvalidSpec {
                context: "evaluate forward",
                message: e.to_string(),
            })?;
            Ok(stages.last().expect("at least one stage").clone())
        };
        let averaged = |x: &Tensor<f32>| -> Result<Tensor<f32>, TensorError> {
            if opts.use_flip {
                crate::codec::flip_average(forward_last, x, &codec_cfg)
            } else {
                forward_last(x)
            }
        };

        let mut poses = Vec::with_capacity(eval_samples.len());
        let mut gts = Vec::with_capacity(eval_samples.len());
        for sample in &eval_samples {
            let maps = if opts.scales == [1.0] {
                averaged(&crate::img::image_to_tensor::<f32>(&sample.image)?)?
            } else {
                crate::codec::multiscale_average(
                    averaged,
                    &sample.image,
                    &opts.scales,
                    model_cfg.input_size,
                    opts.fill,
                    &codec_cfg,
                )?
            };
            let maps = Tensor::from_vec(
                vec![maps.shape()[1], maps.shape()[2], maps.shape()[3]],
                maps.data().to_vec(),
            )?;
            poses.push(crate::codec::decode_heatmaps(&maps, &codec_cfg)?);
            gts.push(sample.keypoints.clone());
        }
        Ok(pckh(&poses, &gts, opts.alpha)?)
    })
}

/// Mean per-stage loss over a dataset (letterboxed); used to check that
/// refinement stages do not degrade the estimate.
pub fn per_stage_losses(
    model: &Model<f32>,
    dataset: &[Sample],
    sigma: f64,
    fill: [u8; 3],
) -> Result<Vec<f64>, TrainError> {
    let model_cfg = match &model.descriptor {
        crate::model::ModelDescriptor::Network { config } => config.clone(),
        other => {
            return Err(TrainError::InvalidConfig(format!(
                "needs a network model, got {other:?}"
            )))
        }
    };
    let codec_cfg = codec_for(&model_cfg, sigma);
    let eval_samples = letterboxed(dataset, model_cfg.input_size, fill);
    crate::tensor::no_grad(|| {
        let mut totals: Vec<f64> = Vec::new();
        for sample in &eval_samples {
            let refs = [sample];
            let (batch, gt, weights) = batch_targets::<f32>(&refs, &model_cfg, &codec_cfg)?;
            let stages = model.forward(&batch)?;
            if totals.is_empty() {
                totals = vec![0.0; stages.len()];
            }
            for (t, stage) in totals.iter_mut().zip(&stages) {
                *t += crate::metrics::single_stage_loss(stage, &gt, &weights)?.data()[0] as f64;
            }
        }
        for t in totals.iter_mut() {
            *t /= eval_samples.len() as f64;
        }
        Ok(totals)
    })
}
