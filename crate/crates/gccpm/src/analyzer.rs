//! Static complexity accounting (parameters, multiply-accumulates) and a
//! wall-clock per-layer profiler.
//!
//! Conventions: one multiply-accumulate counts as one FLOP; convolution MACs
//! are counted on the zero-padded input (`weights × output pixels`); pooling,
//! upsampling and elementwise layers count as zero MACs.

use std::fmt::Write as _;

use crate::model::{Model, ModelResult};
use crate::scalar::Scalar;
use crate::tensor::ConvSpec;

/// Environment variable overriding the profiler thread count (default 1).
pub const PROFILE_THREADS_ENV: &str = "GCCPM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv1x1,
    Conv3x3,
    Depthwise,
    Pool,
    Upsample,
    Other,
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Conv3x3 => "conv3x3",
            OpKind::Depthwise => "depthwise",
            OpKind::Pool => "pool",
            OpKind::Upsample => "upsample",
            OpKind::Other => "other",
        };
        write!(f, "{s}")
    }
}

pub const OP_KIND_ORDER: [OpKind; 6] = [
    OpKind::Conv1x1,
    OpKind::Conv3x3,
    OpKind::Depthwise,
    OpKind::Pool,
    OpKind::Upsample,
    OpKind::Other,
];

fn classify(spec: Option<&ConvSpec>) -> OpKind {
    match spec {
        Some(s) if s.groups > 1 && s.groups == s.in_channels => OpKind::Depthwise,
        Some(s) if s.kernel == (1, 1) => OpKind::Conv1x1,
        Some(s) if s.kernel == (3, 3) => OpKind::Conv3x3,
        Some(_) => OpKind::Other,
        None => OpKind::Other,
    }
}

#[derive(Debug, Clone)]
pub struct LayerStats {
    pub layer_name: String,
    pub op_kind: OpKind,
    pub params: usize,
    pub macs: u64,
    pub mean_time: f64,
    pub time_share: f64,
}

#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub layers: Vec<LayerStats>,
    pub total_params: usize,
    pub total_params_without_bias: usize,
    pub total_macs: u64,
}

/// Per-layer and total parameter counts (conv: Cout·(Cin/groups)·kh·kw,
/// plus Cout when biased). Totals are reported with and without biases.
pub fn count_params<T: Scalar>(model: &Model<T>) -> ComplexityReport {
    let mut layers = Vec::new();
    let mut total = 0usize;
    let mut total_nb = 0usize;
    for view in model.layer_views() {
        let (params, params_nb) = match view.conv_spec {
            Some(spec) => (spec.param_count(), spec.weight_count()),
            None => (0, 0),
        };
        total += params;
        total_nb += params_nb;
        layers.push(LayerStats {
            layer_name: view.name.to_string(),
            op_kind: classify(view.conv_spec.as_ref()),
            params,
            macs: 0,
            mean_time: 0.0,
            time_share: 0.0,
        });
    }
    ComplexityReport {
        layers,
        total_params: total,
        total_params_without_bias: total_nb,
        total_macs: 0,
    }
}

/// Parameter and MAC counts at the given input shape.
pub fn count_macs<T: Scalar>(model: &Model<T>, input_shape: &[usize]) -> ModelResult<ComplexityReport> {
    let shapes = model.infer_shapes(input_shape)?;
    let mut report = count_params(model);
    let mut total = 0u64;
    for (stats, (view, shape)) in report
        .layers
        .iter_mut()
        .zip(model.layer_views().zip(&shapes))
    {
        if let Some(spec) = view.conv_spec {
            let out_pixels = (shape[0] * shape[2] * shape[3]) as u64;
            stats.macs = spec.weight_count() as u64 * out_pixels;
            total += stats.macs;
        }
    }
    report.total_macs = total;
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
pub struct ProfileOptions {
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            warmup: 2,
            iters: 10,
            threads: 1,
        }
    }
}

impl ProfileOptions {
    /// Thread count from [`PROFILE_THREADS_ENV`], else 1 (stable timing).
    pub fn threads_from_env() -> usize {
        std::env::var(PROFILE_THREADS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub layers: Vec<LayerStats>,
    /// Aggregate time share and layer count per op kind.
    pub groups: Vec<(OpKind, f64, usize)>,
    pub total_mean_time: f64,
}

/// Mean per-layer forward wall time over `iters` runs (after discarding
/// `warmup` runs), on a dedicated pool with `threads` threads. Layers run
/// sequentially, so shares attribute cleanly.
pub fn profile<T: Scalar>(
    model: &Model<T>,
    input_shape: &[usize],
    opts: &ProfileOptions,
) -> ModelResult<ProfileReport> {
    let mut report = count_macs(model, input_shape)?;
    let batch = crate::tensor::Tensor::full(input_shape.to_vec(), T::cast(0.1));

    let mut totals = vec![0.0f64; report.layers.len()];
    let run = |totals: &mut Vec<f64>| -> ModelResult<()> {
        crate::tensor::no_grad(|| -> ModelResult<()> {
            for _ in 0..opts.warmup {
                model.forward(&batch)?;
            }
            for _ in 0..opts.iters.max(1) {
                model.execute_with(&batch, |idx, _, _, elapsed| {
                    totals[idx] += elapsed.as_secs_f64();
                })?;
            }
            Ok(())
        })
    };
    if opts.threads <= 1 {
        crate::tensor::run_sequential(|| run(&mut totals))?;
    } else {
        run(&mut totals)?;
    }

    let iters = opts.iters.max(1) as f64;
    for (stats, total) in report.layers.iter_mut().zip(&totals) {
        stats.mean_time = total / iters;
    }
    let total_mean: f64 = report.layers.iter().map(|l| l.mean_time).sum();
    if total_mean > 0.0 {
        for stats in &mut report.layers {
            stats.time_share = stats.mean_time / total_mean;
        }
    }

    let mut groups = Vec::new();
    for kind in OP_KIND_ORDER {
        let share: f64 = report
            .layers
            .iter()
            .filter(|l| l.op_kind == kind)
            .map(|l| l.time_share)
            .sum();
        let count = report.layers.iter().filter(|l| l.op_kind == kind).count();
        if count > 0 {
            groups.push((kind, share, count));
        }
    }
    Ok(ProfileReport {
        layers: report.layers,
        groups,
        total_mean_time: total_mean,
    })
}

pub const CSV_HEADER: &str = "layer_name,op_kind,params,macs,mean_time_s,time_share";

pub fn to_csv(layers: &[LayerStats]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for l in layers {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.9},{:.6}",
            l.layer_name, l.op_kind, l.params, l.macs, l.mean_time, l.time_share
        );
    }
    out
}

/// Aligned text table of per-layer stats plus totals.
pub fn render_table(report: &ComplexityReport) -> String {
    let name_w = report
        .layers
        .iter()
        .map(|l| l.layer_name.len())
        .max()
        .unwrap_or(10)
        .max(5)
        + 2;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$} {:>10} {:>12} {:>14}",
        "layer", "kind", "params", "macs"
    );
    for l in &report.layers {
        let _ = writeln!(
            out,
            "{:<name_w$} {:>10} {:>12} {:>14}",
            l.layer_name,
            l.op_kind.to_string(),
            l.params,
            l.macs
        );
    }
    let _ = writeln!(
        out,
        "{:<name_w$} {:>10} {:>12} {:>14}",
        "total", "", report.total_params, report.total_macs
    );
    let _ = writeln!(
        out,
        "{:<name_w$} {:>10} {:>12}",
        "total (no bias)", "", report.total_params_without_bias
    );
    out
}

/// Profiler report with fixed column layout (golden-file stable).
pub fn render_profile(report: &ProfileReport) -> String {
    let name_w = report
        .layers
        .iter()
        .map(|l| l.layer_name.len())
        .max()
        .unwrap_or(10)
        .max(5)
        + 2;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$} {:>10} {:>12} {:>14} {:>12} {:>10}",
        "layer", "kind", "params", "macs", "mean_ms", "share"
    );
    for l in &report.layers {
        let _ = writeln!(
            out,
            "{:<name_w$} {:>10} {:>12} {:>14} {:>12.4} {:>9.1}%",
            l.layer_name,
            l.op_kind.to_string(),
            l.params,
            l.macs,
            l.mean_time * 1e3,
            l.time_share * 100.0
        );
    }
    let _ = writeln!(out, "--");
    for (kind, share, count) in &report.groups {
        let _ = writeln!(
            out,
            "{:<name_w$} {:>10} {:>12} {:>14} {:>12} {:>9.1}%",
            format!("group {kind}"),
            "",
            "",
            "",
            count,
            share * 100.0
        );
    }
    out
}

/// Reference complexity of the three context modules on 128-channel 32×32
/// feature maps, next to the published values they are checked against.
#[derive(Debug, Clone)]
pub struct ReferenceRow {
    pub kind: crate::model::ContextKind,
    pub params: usize,
    pub macs: u64,
    pub reference_params: f64,
    pub reference_macs: f64,
}

pub const REFERENCE_INPUT: [usize; 4] = [1, 128, 32, 32];

pub fn reference_rows<T: Scalar>() -> ModelResult<Vec<ReferenceRow>> {
    use crate::model::{build_reference_context_model, ContextKind};
    let table = [
        (ContextKind::Aspp, 9.52e6, 9.75e9),
        (ContextKind::UShaped, 6.44e6, 2.53e9),
        (ContextKind::PyramidPooling, 0.2e6, 0.07e9),
    ];
    let mut rows = Vec::new();
    for (kind, ref_params, ref_macs) in table {
        let model = build_reference_context_model::<T>(kind, 0)?;
        let report = count_macs(&model, &REFERENCE_INPUT)?;
        rows.push(ReferenceRow {
            kind,
            params: report.total_params,
            macs: report.total_macs,
            reference_params: ref_params,
            reference_macs: ref_macs,
        });
    }
    Ok(rows)
}

pub fn render_reference_table(rows: &[ReferenceRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>12} {:>10} {:>10}",
        "module", "params(M)", "ref(M)", "gflops", "ref"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>12.3} {:>12.2} {:>10.3} {:>10.2}",
            r.kind.to_string(),
            r.params as f64 / 1e6,
            r.reference_params / 1e6,
            r.macs as f64 / 1e9,
            r.reference_macs / 1e9
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_bottleneck_stack, ModelBuilder, ModelDescriptor};
    use crate::tensor::ConvSpec;

    fn single_conv_model(spec: ConvSpec) -> Model<f32> {
        let mut b = ModelBuilder::new(0);
        let input = b.input("input");
        let conv = b.conv("conv", input, spec, false);
        b.finish(ModelDescriptor::Custom, spec.in_channels, vec![conv])
    }

    #[test]
    fn conv_param_closed_form() {
        let model = single_conv_model(ConvSpec::new(16, 32, (3, 3)));
        let report = count_params(&model);
        assert_eq!(report.total_params, 16 * 32 * 9 + 32);
        assert_eq!(report.total_params, 4640);
        assert_eq!(report.total_params_without_bias, 4608);
    }

    #[test]
    fn conv_macs_closed_form() {
        // 3x3 conv 16->32 producing an 8x8 map: 4608 * 64 MACs.
        let model = single_conv_model(ConvSpec::new(16, 32, (3, 3)).same_padding());
        let report = count_macs(&model, &[1, 16, 8, 8]).unwrap();
        assert_eq!(report.total_macs, 294_912);
    }

    #[test]
    fn pool_and_upsample_count_zero() {
        use crate::tensor::{PoolKind, UpsampleMode};
        let mut b = ModelBuilder::<f32>::new(0);
        let input = b.input("input");
        let pool = b.pool("pool", input, PoolKind::Avg, (2, 2), (2, 2));
        let up = b.upsample("up", pool, 2, UpsampleMode::Nearest);
        let model = b.finish(ModelDescriptor::Custom, 4, vec![up]);
        let report = count_macs(&model, &[1, 4, 8, 8]).unwrap();
        assert_eq!(report.total_params, 0);
        assert_eq!(report.total_macs, 0);
    }

    #[test]
    fn doubling_spatial_size_quadruples_macs() {
        let model = single_conv_model(ConvSpec::new(8, 8, (3, 3)).same_padding());
        let small = count_macs(&model, &[1, 8, 8, 8]).unwrap().total_macs;
        let big = count_macs(&model, &[1, 8, 16, 16]).unwrap().total_macs;
        assert_eq!(big, 4 * small);
    }

    #[test]
    fn params_match_registered_scalars_and_blob_length() {
        let model = build_bottleneck_stack::<f32>(16, 2, 1).unwrap();
        let report = count_params(&model);
        assert_eq!(report.total_params, model.param_scalar_count());

        let dir = tempfile::tempdir().unwrap();
        crate::model::save_checkpoint(&model, dir.path()).unwrap();
        let blob = std::fs::read(dir.path().join("params.bin")).unwrap();
        assert_eq!(report.total_params * 4, blob.len());
    }

    #[test]
    fn time_shares_sum_to_one() {
        let model = build_bottleneck_stack::<f32>(16, 3, 0).unwrap();
        let report = profile(
            &model,
            &[1, 16, 8, 8],
            &ProfileOptions {
                warmup: 1,
                iters: 3,
                threads: 1,
            },
        )
        .unwrap();
        let sum: f64 = report.layers.iter().map(|l| l.time_share).sum();
        assert!((sum - 1.0).abs() < 1e-6, "shares sum to {sum}");
        for l in &report.layers {
            assert!(l.mean_time.is_finite() && l.mean_time >= 0.0);
        }
    }

    #[test]
    fn conv1x1_group_has_layer_count_plurality_in_bottleneck() {
        let model = build_bottleneck_stack::<f32>(32, 8, 0).unwrap();
        let report = profile(&model, &[1, 32, 4, 4], &ProfileOptions { warmup: 0, iters: 1, threads: 1 }).unwrap();
        let count = |kind: OpKind| {
            report
                .groups
                .iter()
                .find(|(k, _, _)| *k == kind)
                .map(|(_, _, c)| *c)
                .unwrap_or(0)
        };
        let one = count(OpKind::Conv1x1);
        for kind in OP_KIND_ORDER {
            if kind != OpKind::Conv1x1 {
                assert!(one > count(kind), "conv1x1 ({one}) not plural vs {kind}");
            }
        }
    }
}
