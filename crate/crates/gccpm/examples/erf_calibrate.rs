// Calibration harness for the receptive-field enlargement measurement:
// prints per-image 95%-mass ERF areas for a baseline and a context model.

use gccpm::augment::AugmentConfig;
use gccpm::data::{gen_dataset, SynthConfig};
use gccpm::erf::{self, ErfConfig};
use gccpm::model::{ContextConfig, ContextKind, ModelConfig, UShapedConfig};
use gccpm::tensor::Tensor;
use gccpm::trainer::{self, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let image_size: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(96);
    let iters: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(600);
    let probe_stride: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(8);
    let keypoint: usize = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(2);
    let at_peak: bool = args.get(5).map(|v| v == "peak").unwrap_or(false);

    let hm = image_size / 8;
    let synth = SynthConfig {
        image_size,
        seed: 41,
        background: gccpm::data::Background::MultiFigure { count: 2 },
        ..SynthConfig::default()
    };
    let dataset = gen_dataset(&synth, 24);
    let train_cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 4,
        max_iters: iters,
        eval_interval: 200,
        seed: 11,
        augment: AugmentConfig {
            input_size: image_size,
            body_mask: gccpm::augment::BodyMaskConfig {
                enabled: true,
                max_side_frac: 0.3,
                center_jitter_frac: 0.35,
            },
            ..AugmentConfig::disabled()
        },
        ..TrainConfig::default()
    };
    let base_cfg = ModelConfig {
        input_size: image_size,
        output_stride: 8,
        heatmap_size: hm,
        backbone_width: 0.125,
        feature_channels: 16,
        num_refinement_stages: 1,
        ..ModelConfig::default()
    };
    let ctx_cfg = ModelConfig {
        context: ContextConfig {
            kind: ContextKind::UShaped,
            u_shaped: UShapedConfig {
                depth: args.get(6).and_then(|v| v.parse().ok()).unwrap_or(2),
                encoder_widths: vec![16; args.get(6).and_then(|v| v.parse().ok()).unwrap_or(2)],
                decoder_widths: vec![16; args.get(6).and_then(|v| v.parse().ok()).unwrap_or(2) - 1],
            },
            ..ContextConfig::default()
        },
        ..base_cfg.clone()
    };
    let t0 = std::time::Instant::now();
    let (baseline, hist_b) = trainer::train(&base_cfg, &train_cfg, &dataset, 1.0, None).unwrap();
    // Same trained weights everywhere; only the context module is added.
    let mut with_ctx =
        gccpm::model::build_model_with_identity_context::<f32>(&ctx_cfg, 99).unwrap();
    let copied = with_ctx.copy_matching_parameters_from(&baseline);
    eprintln!(
        "trained baseline in {:?}; final loss {:.4}; copied {copied} tensors",
        t0.elapsed(),
        hist_b.entries.last().unwrap().val_loss,
    );
    let with_ctx = with_ctx;

    let probe_cfg = ErfConfig {
        stride: probe_stride,
        aggregation: if at_peak {
            gccpm::erf::Aggregation::ValueAtPeak
        } else {
            gccpm::erf::Aggregation::SumAbs
        },
        ..ErfConfig::default()
    };
    let probe_set = gen_dataset(&SynthConfig { seed: 4242, ..synth }, 40);
    let t1 = std::time::Instant::now();
    let mut wins = 0;
    let mut losses = 0;
    let mut base_areas = Vec::new();
    let mut ctx_areas = Vec::new();
    for (i, sample) in probe_set.iter().enumerate() {
        let gt = &sample.keypoints.points[keypoint];
        let gt_cell = ((gt.y / 8.0).round() as usize, (gt.x / 8.0).round() as usize);
        let probe_cfg = ErfConfig { reference: Some(gt_cell), ..probe_cfg };
        let area = |model: &gccpm::model::Model<f32>| {
            let forward =
                |x: &Tensor<f32>| model.forward(x).map(|s| s.last().unwrap().clone());
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + i as u64);
            let map = erf::estimate_erf(forward, &sample.image, keypoint, &probe_cfg, &mut rng).unwrap();
            erf::erf_stats(&map, 0.95).map(|s| s.area_fraction).unwrap_or(0.0)
        };
        let a = area(&baseline);
        let c = area(&with_ctx);
        if c > a {
            wins += 1;
        } else if c < a {
            losses += 1;
        }
        base_areas.push(a);
        ctx_areas.push(c);
        println!("img {i:02}: base {a:.4} ctx {c:.4}");
        if i == 0 {
            // Decay profile: mean importance by probe distance from center.
            for (label, model) in [("base", &baseline), ("ctx ", &with_ctx)] {
                let forward =
                    |x: &Tensor<f32>| model.forward(x).map(|s| s.last().unwrap().clone());
                let mut rng = ChaCha8Rng::seed_from_u64(5000);
                let map =
                    erf::estimate_erf(forward, &sample.image, keypoint, &probe_cfg, &mut rng)
                        .unwrap();
                let center = image_size as f64 / 2.0;
                let mut byring = vec![(0.0, 0usize); 8];
                for r in 0..map.rows {
                    for c2 in 0..map.cols {
                        let px = map.positions_x[c2] as f64 + map.window as f64 / 2.0;
                        let py = map.positions_y[r] as f64 + map.window as f64 / 2.0;
                        let d = ((px - center).powi(2) + (py - center).powi(2)).sqrt();
                        let ring = ((d / (center * 1.42)) * 8.0) as usize;
                        let ring = ring.min(7);
                        byring[ring].0 += map.importance(r, c2);
                        byring[ring].1 += 1;
                    }
                }
                let profile: Vec<String> = byring
                    .iter()
                    .map(|(s, n)| format!("{:.4}", if *n > 0 { s / *n as f64 } else { 0.0 }))
                    .collect();
                eprintln!("decay {label}: {}", profile.join(" "));
            }
        }
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    eprintln!(
        "probing {:?}; medians base {:.4} ctx {:.4}; wins {wins} losses {losses} p {:.5}",
        t1.elapsed(),
        med(&mut base_areas),
        med(&mut ctx_areas),
        erf::sign_test_p(wins, losses)
    );
}
