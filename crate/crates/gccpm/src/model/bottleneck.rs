//! Residual bottleneck stack used as a profiling subject.

use crate::scalar::Scalar;
use crate::tensor::ConvSpec;

use super::{Model, ModelBuilder, ModelDescriptor, ModelError, ModelResult};

/// Stack of residual bottleneck units (1×1 reduce, 3×3, 1×1 expand with a
/// skip connection); two thirds of its convolutions are 1×1.
pub fn build_bottleneck_stack<T: Scalar>(
    channels: usize,
    depth: usize,
    seed: u64,
) -> ModelResult<Model<T>> {
    if depth == 0 {
        return Err(ModelError::InvalidConfig("bottleneck depth must be >= 1".into()));
    }
    if channels == 0 {
        return Err(ModelError::InvalidConfig("bottleneck channels must be positive".into()));
    }
    let mid = (channels / 4).max(1);
    let mut b = ModelBuilder::new(seed);
    let input = b.input("input");
    let mut node = input;
    for i in 0..depth {
        let p = format!("unit{i}");
        let reduce = b.conv(
            format!("{p}.reduce"),
            node,
            ConvSpec::new(channels, mid, (1, 1)),
            true,
        );
        let conv = b.conv(
            format!("{p}.conv"),
            reduce,
            ConvSpec::new(mid, mid, (3, 3)).same_padding(),
            true,
        );
        let expand = b.conv(
            format!("{p}.expand"),
            conv,
            ConvSpec::new(mid, channels, (1, 1)),
            false,
        );
        node = b.add(format!("{p}.sum"), node, expand);
    }
    Ok(b.finish(
        ModelDescriptor::BottleneckStack { channels, depth },
        channels,
        vec![node],
    ))
}

/// Closed-form parameter count of one bottleneck unit (with biases).
pub fn bottleneck_unit_params(channels: usize) -> usize {
    let mid = (channels / 4).max(1);
    (channels * mid + mid) + (mid * mid * 9 + mid) + (mid * channels + channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_contract_preserves_shape() {
        let model = build_bottleneck_stack::<f32>(64, 1, 0).unwrap();
        let x = crate::tensor::Tensor::zeros(vec![1, 64, 8, 8]);
        let out = model.forward(&x).unwrap();
        assert_eq!(out[0].shape(), x.shape());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let model = build_bottleneck_stack::<f32>(64, 3, 0).unwrap();
        assert_eq!(model.param_scalar_count(), 3 * bottleneck_unit_params(64));
    }

    #[test]
    fn one_by_one_convs_dominate_layer_count() {
        let model = build_bottleneck_stack::<f32>(32, 4, 0).unwrap();
        let mut one = 0;
        let mut other_convs = 0;
        for node in &model.nodes {
            if let super::super::LayerOp::Conv { spec, .. } = &node.op {
                if spec.kernel == (1, 1) {
                    one += 1;
                } else {
                    other_convs += 1;
                }
            }
        }
        assert!(one * 3 >= (one + other_convs) * 2, "{one} of {}", one + other_convs);
    }
}
