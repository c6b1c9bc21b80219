//! The three pluggable global-context modules. Each maps `in_channels` maps
//! of size `map_size` to `out_channels` maps of the same size.

use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, PoolKind, UpsampleMode};

use super::{
    validate_context, ContextConfig, ContextKind, Model, ModelBuilder, ModelDescriptor,
    ModelResult, NodeId,
};

#[allow(clippy::too_many_arguments)]
pub(crate) fn add_context_module<T: Scalar>(
    b: &mut ModelBuilder<T>,
    prefix: &str,
    input: NodeId,
    in_channels: usize,
    out_channels: usize,
    map_size: usize,
    kind: ContextKind,
    cfg: &ContextConfig,
) -> ModelResult<NodeId> {
    match kind {
        ContextKind::None => Ok(input),
        ContextKind::Aspp => Ok(add_aspp(b, prefix, input, in_channels, out_channels, cfg)),
        ContextKind::PyramidPooling => {
            add_ppm(b, prefix, input, in_channels, out_channels, map_size, cfg)
        }
        ContextKind::UShaped => {
            add_u_shaped(b, prefix, input, in_channels, out_channels, cfg)
        }
    }
}

/// Four parallel branches of 3×3 atrous conv (one rate each, `mid_channels`)
/// followed by two 1×1 convs; branch outputs are summed.
fn add_aspp<T: Scalar>(
    b: &mut ModelBuilder<T>,
    prefix: &str,
    input: NodeId,
    in_channels: usize,
    out_channels: usize,
    cfg: &ContextConfig,
) -> NodeId {
    let mid = cfg.aspp.mid_channels;
    let mut branch_outputs = Vec::new();
    for (i, &rate) in cfg.aspp.rates.iter().enumerate() {
        let atrous = b.conv(
            format!("{prefix}.b{i}.atrous"),
            input,
            ConvSpec::new(in_channels, mid, (3, 3)).with_dilation(rate).same_padding(),
            true,
        );
        let proj1 = b.conv(
            format!("{prefix}.b{i}.proj1"),
            atrous,
            ConvSpec::new(mid, mid, (1, 1)),
            true,
        );
        let proj2 = b.conv(
            format!("{prefix}.b{i}.proj2"),
            proj1,
            ConvSpec::new(mid, out_channels, (1, 1)),
            false,
        );
        branch_outputs.push(proj2);
    }
    let mut acc = branch_outputs[0];
    for (i, &next) in branch_outputs.iter().enumerate().skip(1) {
        acc = b.add(format!("{prefix}.sum{i}"), acc, next);
    }
    acc
}

/// Average-pooled levels (kernel and stride = map_size / divisor, so level d
/// is d×d), a 3×3 conv per level at the pooled resolution, bilinear upsample
/// back, concatenation with the input and a 1×1 fusion conv.
fn add_ppm<T: Scalar>(
    b: &mut ModelBuilder<T>,
    prefix: &str,
    input: NodeId,
    in_channels: usize,
    out_channels: usize,
    map_size: usize,
    cfg: &ContextConfig,
) -> ModelResult<NodeId> {
    let bc = cfg.ppm.branch_channels;
    let mut parts = vec![input];
    for (i, &div) in cfg.ppm.divisors.iter().enumerate() {
        let kernel = map_size / div;
        let pooled = b.pool(
            format!("{prefix}.l{i}.pool"),
            input,
            PoolKind::Avg,
            (kernel, kernel),
            (kernel, kernel),
        );
        let conv = b.conv(
            format!("{prefix}.l{i}.conv"),
            pooled,
            ConvSpec::new(in_channels, bc, (3, 3)).same_padding(),
            true,
        );
        let up = b.upsample(format!("{prefix}.l{i}.up"), conv, kernel, UpsampleMode::Bilinear);
        parts.push(up);
    }
    let cat = b.concat(format!("{prefix}.cat"), parts);
    let fused_in = in_channels + bc * cfg.ppm.divisors.len();
    Ok(b.conv(
        format!("{prefix}.fuse"),
        cat,
        ConvSpec::new(fused_in, out_channels, (1, 1)),
        true,
    ))
}

/// Encoder of stride-2 3×3 convs halving the resolution per level, decoder of
/// bilinear upsample + skip concatenation + 3×3 conv per level; the top
/// decoder conv produces the module output at the input resolution.
fn add_u_shaped<T: Scalar>(
    b: &mut ModelBuilder<T>,
    prefix: &str,
    input: NodeId,
    in_channels: usize,
    out_channels: usize,
    cfg: &ContextConfig,
) -> ModelResult<NodeId> {
    let u = &cfg.u_shaped;
    let depth = u.depth;

    // Encoder; skips[l] holds the features entering level l.
    let mut skips = vec![input];
    let mut channels = vec![in_channels];
    let mut node = input;
    let mut c = in_channels;
    for (l, &width) in u.encoder_widths.iter().enumerate() {
        node = b.conv(
            format!("{prefix}.enc{l}"),
            node,
            ConvSpec::new(c, width, (3, 3)).with_stride((2, 2)).with_padding((1, 1)),
            true,
        );
        c = width;
        skips.push(node);
        channels.push(c);
    }

    // Decoder back up to the input resolution; decoder_widths is listed
    // deepest level first.
    for l in (0..depth).rev() {
        let up = b.upsample(format!("{prefix}.dec{l}.up"), node, 2, UpsampleMode::Bilinear);
        let cat = b.concat(format!("{prefix}.dec{l}.cat"), vec![up, skips[l]]);
        let cat_c = c + channels[l];
        let width = if l == 0 {
            out_channels
        } else {
            u.decoder_widths[depth - 1 - l]
        };
        node = b.conv(
            format!("{prefix}.dec{l}.conv"),
            cat,
            ConvSpec::new(cat_c, width, (3, 3)).same_padding(),
            true,
        );
        c = width;
    }
    Ok(node)
}

/// Context configuration used for the reference complexity table.
pub fn reference_context_config(kind: ContextKind) -> ContextConfig {
    ContextConfig {
        kind,
        ..ContextConfig::default()
    }
}

/// Standalone model holding one context module on 128-channel 32×32 maps,
/// the configuration the reference complexity table is quoted for.
pub fn build_reference_context_model<T: Scalar>(kind: ContextKind, seed: u64) -> ModelResult<Model<T>> {
    build_context_module(&reference_context_config(kind), 128, 128, 32, seed)
}

/// Builds a context module as a standalone model.
pub fn build_context_module<T: Scalar>(
    cfg: &ContextConfig,
    in_channels: usize,
    out_channels: usize,
    map_size: usize,
    seed: u64,
) -> ModelResult<Model<T>> {
    validate_context(cfg, map_size)?;
    let mut b = ModelBuilder::new(seed);
    let input = b.input("input");
    let out = add_context_module(&mut b, "ctx", input, in_channels, out_channels, map_size, cfg.kind, cfg)?;
    Ok(b.finish(
        ModelDescriptor::ContextOnly {
            context: cfg.clone(),
            in_channels,
            out_channels,
            map_size,
        },
        in_channels,
        vec![out],
    ))
}
