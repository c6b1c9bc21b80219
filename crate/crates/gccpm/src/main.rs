//! Command-line entry point. Each subcommand is a thin wrapper over the
//! library; outputs are tables, CSV files and PNG images.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gccpm::analyzer;
use gccpm::config::RunConfig;
use gccpm::data;
use gccpm::erf;
use gccpm::model::{build_bottleneck_stack, build_model, load_checkpoint_expecting, Model};
use gccpm::trainer::{self, EvalOptions};

#[derive(Parser)]
#[command(
    name = "gccpm",
    version,
    about = "Pose-machine laboratory: synthetic data, training, evaluation, complexity analysis and receptive-field probing"
)]
struct Cli {
    /// Master seed; overrides the seeds in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (PNGs + annotations.json).
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 50)]
        count: usize,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory (from `synth` or matching its schema).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, history and reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory (e.g. <train-out>/checkpoints/final).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Average heatmaps over the image and its mirror.
        #[arg(long, default_value_t = false)]
        flip: bool,
        /// Comma-separated test scales, e.g. 0.75,1.0,1.25.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0])]
        scales: Vec<f64>,
        /// Optional output directory for the CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter/MAC tables for the configured model.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        /// Print the three context modules next to their reference values.
        #[arg(long, default_value_t = false)]
        table3: bool,
        /// Also write the per-layer table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time each layer of a forward pass.
    Profile {
        #[command(flatten)]
        config: ConfigArg,
        /// Profile a residual bottleneck stack of this depth instead of the
        /// configured network.
        #[arg(long)]
        bottleneck_depth: Option<usize>,
        /// Channel count for the bottleneck stack.
        #[arg(long, default_value_t = 64)]
        bottleneck_channels: usize,
        /// Spatial side of the bottleneck profiling input.
        #[arg(long, default_value_t = 32)]
        bottleneck_map: usize,
        /// Discarded warmup runs.
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Timed runs per layer.
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Also write per-layer stats as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Estimate the empirical receptive field by occlusion probing.
    Erf {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint to probe; a seeded random-weight model is used if omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image to probe; a synthetic sample is generated if omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Output directory (importance map, overlay, CSV).
        #[arg(long)]
        out: PathBuf,
        /// Keypoint channel to probe.
        #[arg(long, default_value_t = 9)]
        keypoint: usize,
        /// Probe window side in pixels.
        #[arg(long, default_value_t = 11)]
        window: usize,
        /// Probe stride in pixels.
        #[arg(long, default_value_t = 4)]
        stride: usize,
        /// Aggregate the heatmap difference over all channels.
        #[arg(long, default_value_t = false)]
        all_channels: bool,
        /// Mass fraction for the reported bounding box.
        #[arg(long, default_value_t = 0.95)]
        mass: f64,
    },
    /// Render augmented samples for visual audit.
    AugmentPreview {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var(analyzer::PROFILE_THREADS_ENV) {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            // One line, machine parsable.
            let one_line = message.replace('\n', " ");
            eprintln!("error: {one_line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Synth { config, out, count } => {
            let mut cfg = load_config(&config.config)?;
            if let Some(seed) = cli.seed {
                cfg.synth.seed = seed;
            }
            let samples = data::gen_dataset(&cfg.synth, count);
            data::save_dataset(&out, &samples).map_err(|e| e.to_string())?;
            copy_config(&cfg, cli.seed, &out)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Train { config, data: data_dir, out } => {
            let mut cfg = load_config(&config.config)?;
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            cfg.train.augment = cfg.augment.clone();
            let dataset = data::load_dataset(&data_dir).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let checkpoints = out.join("checkpoints");
            let (model, history) = trainer::train(
                &cfg.model,
                &cfg.train,
                &dataset,
                cfg.codec.sigma,
                Some(&checkpoints),
            )
            .map_err(|e| e.to_string())?;
            std::fs::write(out.join("history.csv"), history.to_csv()).map_err(|e| e.to_string())?;
            let result = trainer::evaluate(
                &model,
                &dataset,
                &EvalOptions {
                    fill: cfg.augment.fill_color,
                    sigma: cfg.codec.sigma,
                    ..EvalOptions::default()
                },
            )
            .map_err(|e| e.to_string())?;
            std::fs::write(
                out.join("train_report.txt"),
                format!("train-set evaluation\n{}", result.render_table()),
            )
            .map_err(|e| e.to_string())?;
            copy_config(&cfg, cli.seed, &out)?;
            print!("{}", result.render_table());
            println!("history and checkpoints in {}", out.display());
            Ok(())
        }
        Command::Eval {
            config,
            data: data_dir,
            checkpoint,
            flip,
            scales,
            out,
        } => {
            let cfg = load_config(&config.config)?;
            let dataset = data::load_dataset(&data_dir).map_err(|e| e.to_string())?;
            let model: Model<f32> =
                load_checkpoint_expecting(&checkpoint, &cfg.model).map_err(|e| e.to_string())?;
            let result = trainer::evaluate(
                &model,
                &dataset,
                &EvalOptions {
                    use_flip: flip,
                    scales,
                    fill: cfg.augment.fill_color,
                    sigma: cfg.codec.sigma,
                    alpha: 0.5,
                },
            )
            .map_err(|e| e.to_string())?;
            print!("{}", result.render_table());
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
                let csv = format!(
                    "{}\n{}\n",
                    gccpm::metrics::EvalResult::csv_header(),
                    result.to_csv_row()
                );
                std::fs::write(out.join("eval.csv"), csv).map_err(|e| e.to_string())?;
                copy_config(&cfg, cli.seed, &out)?;
            }
            Ok(())
        }
        Command::Analyze { config, table3, csv } => {
            let cfg = load_config(&config.config)?;
            if table3 {
                let rows = analyzer::reference_rows::<f32>().map_err(|e| e.to_string())?;
                print!("{}", analyzer::render_reference_table(&rows));
            } else {
                let model = build_model::<f32>(&cfg.model, cli.seed.unwrap_or(0))
                    .map_err(|e| e.to_string())?;
                let shape = [1, 3, cfg.model.input_size, cfg.model.input_size];
                let report = analyzer::count_macs(&model, &shape).map_err(|e| e.to_string())?;
                print!("{}", analyzer::render_table(&report));
                if let Some(path) = csv {
                    std::fs::write(path, analyzer::to_csv(&report.layers)).map_err(|e| e.to_string())?;
                }
            }
            Ok(())
        }
        Command::Profile {
            config,
            bottleneck_depth,
            bottleneck_channels,
            bottleneck_map,
            warmup,
            iters,
            csv,
        } => {
            let cfg = load_config(&config.config)?;
            let opts = analyzer::ProfileOptions {
                warmup,
                iters,
                threads: analyzer::ProfileOptions::threads_from_env(),
            };
            let report = match bottleneck_depth {
                Some(depth) => {
                    let model = build_bottleneck_stack::<f32>(bottleneck_channels, depth, cli.seed.unwrap_or(0))
                        .map_err(|e| e.to_string())?;
                    let shape = [1, bottleneck_channels, bottleneck_map, bottleneck_map];
                    analyzer::profile(&model, &shape, &opts).map_err(|e| e.to_string())?
                }
                None => {
                    let model = build_model::<f32>(&cfg.model, cli.seed.unwrap_or(0))
                        .map_err(|e| e.to_string())?;
                    let shape = [1, 3, cfg.model.input_size, cfg.model.input_size];
                    analyzer::profile(&model, &shape, &opts).map_err(|e| e.to_string())?
                }
            };
            print!("{}", analyzer::render_profile(&report));
            if let Some(path) = csv {
                std::fs::write(path, analyzer::to_csv(&report.layers)).map_err(|e| e.to_string())?;
            }
            Ok(())
        }
        Command::Erf {
            config,
            checkpoint,
            image,
            out,
            keypoint,
            window,
            stride,
            all_channels,
            mass,
        } => {
            let mut cfg = load_config(&config.config)?;
            if let Some(seed) = cli.seed {
                cfg.synth.seed = seed;
            }
            let model: Model<f32> = match &checkpoint {
                Some(dir) => load_checkpoint_expecting(dir, &cfg.model).map_err(|e| e.to_string())?,
                None => build_model(&cfg.model, cli.seed.unwrap_or(0)).map_err(|e| e.to_string())?,
            };
            let probe_image = match &image {
                Some(path) => image::open(path).map_err(|e| e.to_string())?.into_rgb8(),
                None => {
                    let synth = data::SynthConfig {
                        image_size: cfg.model.input_size,
                        ..cfg.synth.clone()
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
                    data::gen_synthetic(&mut rng, &synth).image
                }
            };
            if probe_image.width() as usize != cfg.model.input_size
                || probe_image.height() as usize != cfg.model.input_size
            {
                return Err(format!(
                    "probe image must be {0}x{0} to match the model input",
                    cfg.model.input_size
                ));
            }
            let erf_cfg = erf::ErfConfig {
                window,
                stride,
                all_channels,
                ..erf::ErfConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            rng.set_stream(7);
            let forward = |x: &gccpm::tensor::Tensor<f32>| {
                model.forward(x).map(|stages| stages.last().expect("stages").clone())
            };
            let map = erf::estimate_erf(forward, &probe_image, keypoint, &erf_cfg, &mut rng)
                .map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let stats = match erf::erf_stats(&map, mass) {
                Ok(stats) => {
                    println!(
                        "{}-mass box: ({}, {})..({}, {})  area fraction {:.4}",
                        mass, stats.pixel_box.0, stats.pixel_box.1, stats.pixel_box.2,
                        stats.pixel_box.3, stats.area_fraction
                    );
                    Some(stats)
                }
                Err(e) => {
                    println!("no box: {e}");
                    None
                }
            };
            erf::render_importance(&map)
                .save(out.join("importance.png"))
                .map_err(|e| e.to_string())?;
            erf::render_overlay(&map, &probe_image, stats.as_ref())
                .save(out.join("overlay.png"))
                .map_err(|e| e.to_string())?;
            std::fs::write(out.join("erf.csv"), erf::to_csv(&map)).map_err(|e| e.to_string())?;
            copy_config(&cfg, cli.seed, &out)?;
            println!("probe outputs in {}", out.display());
            Ok(())
        }
        Command::AugmentPreview { config, out, count } => {
            let mut cfg = load_config(&config.config)?;
            if let Some(seed) = cli.seed {
                cfg.synth.seed = seed;
            }
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let synth = data::SynthConfig {
                image_size: cfg.model.input_size,
                ..cfg.synth.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(cfg.synth.seed));
            rng.set_stream(11);
            for i in 0..count {
                let sample = {
                    let mut sample_rng = ChaCha8Rng::seed_from_u64(synth.seed);
                    sample_rng.set_stream(i as u64 + 1);
                    data::gen_synthetic(&mut sample_rng, &synth)
                };
                let augmented = gccpm::augment::augment_sample(&sample, &mut rng, &cfg.augment);
                augmented
                    .image
                    .save(out.join(format!("aug_{i:03}.png")))
                    .map_err(|e| e.to_string())?;
            }
            copy_config(&cfg, cli.seed, &out)?;
            println!("wrote {count} previews to {}", out.display());
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, String> {
    RunConfig::load(path).map_err(|e| e.to_string())
}

/// Reproducibility copy: the resolved config and the invocation line.
fn copy_config(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    cfg.save(&out.join("config.toml")).map_err(|e| e.to_string())?;
    let argv: Vec<String> = std::env::args().collect();
    let invocation = format!("{}\nseed: {:?}\n", argv.join(" "), seed);
    std::fs::write(out.join("invocation.txt"), invocation).map_err(|e| e.to_string())
}
