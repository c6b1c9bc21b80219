//! The pose network: a declarative config, a small layer-graph IR, and
//! builders for the backbone, the estimation stages and the pluggable
//! context modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{
    add, concat, conv2d, pool2d, relu, upsample, ConvSpec, PoolKind, Tensor, TensorError,
    UpsampleMode,
};

mod bottleneck;
mod checkpoint;
mod context;

pub use bottleneck::{bottleneck_unit_params, build_bottleneck_stack};
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointError};
pub use context::{build_context_module, build_reference_context_model, reference_context_config};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("forward input shape {got:?} does not match expected {expected:?}")]
    WrongInput { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Which context module sits at the input of each refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    None,
    Aspp,
    PyramidPooling,
    UShaped,
}

impl std::fmt::Display for ContextKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ContextKind::None => "none",
            ContextKind::Aspp => "aspp",
            ContextKind::PyramidPooling => "pyramid_pooling",
            ContextKind::UShaped => "u_shaped",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsppConfig {
    pub mid_channels: usize,
    pub rates: Vec<usize>,
}

impl Default for AsppConfig {
    fn default() -> Self {
        AsppConfig {
            mid_channels: 1024,
            rates: vec![3, 6, 9, 12],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpmConfig {
    /// Pooling kernel = map_size / divisor per axis, with matching stride, so
    /// divisor d yields a d×d pooled level.
    pub divisors: Vec<usize>,
    pub branch_channels: usize,
}

impl Default for PpmConfig {
    fn default() -> Self {
        PpmConfig {
            divisors: vec![2, 4, 8, 16],
            branch_channels: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UShapedConfig {
    /// Number of halvings; resolution at the bottom is map_size / 2^depth.
    pub depth: usize,
    pub encoder_widths: Vec<usize>,
    /// Widths of the decoder convolutions below the top level; the final
    /// decoder convolution always produces the module output channels.
    pub decoder_widths: Vec<usize>,
}

impl Default for UShapedConfig {
    fn default() -> Self {
        // Reference widths; chosen analytically so the module lands at the
        // documented complexity target on 128-channel 32x32 maps.
        UShapedConfig {
            depth: 3,
            encoder_widths: vec![256, 96, 96],
            decoder_widths: vec![256, 928],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub kind: ContextKind,
    pub aspp: AsppConfig,
    pub ppm: PpmConfig,
    pub u_shaped: UShapedConfig,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            kind: ContextKind::None,
            aspp: AsppConfig::default(),
            ppm: PpmConfig::default(),
            u_shaped: UShapedConfig::default(),
        }
    }
}

/// Full declarative description of the network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub output_stride: usize,
    pub heatmap_size: usize,
    pub num_keypoints: usize,
    pub include_background_map: bool,
    pub backbone_width: f64,
    pub feature_channels: usize,
    pub num_refinement_stages: usize,
    pub context: ContextConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 256,
            output_stride: 8,
            heatmap_size: 32,
            num_keypoints: 16,
            include_background_map: false,
            backbone_width: 1.0,
            feature_channels: 128,
            num_refinement_stages: 5,
            context: ContextConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Heatmap channel count: keypoints plus the optional background map.
    pub fn heatmap_channels(&self) -> usize {
        self.num_keypoints + usize::from(self.include_background_map)
    }

    pub fn validate(&self) -> ModelResult<()> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.heatmap_size * self.output_stride != self.input_size {
            return fail(format!(
                "heatmap_size ({}) * output_stride ({}) must equal input_size ({})",
                self.heatmap_size, self.output_stride, self.input_size
            ));
        }
        if !matches!(self.output_stride, 4 | 8 | 16) {
            return fail(format!("output_stride must be 4, 8 or 16, got {}", self.output_stride));
        }
        if self.num_keypoints == 0 {
            return fail("num_keypoints must be positive".into());
        }
        if self.feature_channels == 0 {
            return fail("feature_channels must be positive".into());
        }
        if self.backbone_width <= 0.0 {
            return fail(format!("backbone_width must be positive, got {}", self.backbone_width));
        }
        validate_context(&self.context, self.heatmap_size)?;
        Ok(())
    }
}

pub(crate) fn validate_context(ctx: &ContextConfig, map_size: usize) -> ModelResult<()> {
    let fail = |m: String| Err(ModelError::InvalidConfig(m));
    match ctx.kind {
        ContextKind::None => {}
        ContextKind::Aspp => {
            let rates = &ctx.aspp.rates;
            if rates.is_empty() || rates[0] < 1 {
                return fail("aspp rates must be >= 1".into());
            }
            if rates.windows(2).any(|w| w[1] <= w[0]) {
                return fail(format!("aspp rates must be strictly increasing, got {rates:?}"));
            }
            if ctx.aspp.mid_channels == 0 {
                return fail("aspp mid_channels must be positive".into());
            }
        }
        ContextKind::PyramidPooling => {
            if ctx.ppm.divisors.is_empty() || ctx.ppm.branch_channels == 0 {
                return fail("ppm needs at least one level and positive branch_channels".into());
            }
            for &d in &ctx.ppm.divisors {
                if d == 0 || d > map_size || map_size % d != 0 {
                    return fail(format!(
                        "ppm divisor {d} incompatible with {map_size}x{map_size} maps"
                    ));
                }
            }
        }
        ContextKind::UShaped => {
            let u = &ctx.u_shaped;
            if u.depth == 0 {
                return fail("u_shaped depth must be >= 1".into());
            }
            if map_size % (1 << u.depth) != 0 {
                return fail(format!(
                    "u_shaped depth {} does not divide {map_size}x{map_size} maps",
                    u.depth
                ));
            }
            if u.encoder_widths.len() != u.depth {
                return fail(format!(
                    "u_shaped needs {} encoder widths, got {}",
                    u.depth,
                    u.encoder_widths.len()
                ));
            }
            if u.decoder_widths.len() + 1 != u.depth {
                return fail(format!(
                    "u_shaped needs {} decoder widths, got {}",
                    u.depth - 1,
                    u.decoder_widths.len()
                ));
            }
            if u.encoder_widths.iter().chain(&u.decoder_widths).any(|&w| w == 0) {
                return fail("u_shaped widths must be positive".into());
            }
        }
    }
    Ok(())
}

/// How a checkpointed model is rebuilt.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Network { config: ModelConfig },
    BottleneckStack { channels: usize, depth: usize },
    ContextOnly { context: ContextConfig, in_channels: usize, out_channels: usize, map_size: usize },
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

/// Read-only per-layer view for complexity accounting.
pub struct LayerView<'a> {
    pub name: &'a str,
    pub conv_spec: Option<crate::tensor::ConvSpec>,
}

pub(crate) enum LayerOp<T: Scalar> {
    Input,
    Conv {
        spec: ConvSpec,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        fused_relu: bool,
    },
    Pool {
        kind: PoolKind,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Upsample {
        factor: usize,
        mode: UpsampleMode,
    },
    Concat,
    Add,
}

pub(crate) struct Node<T: Scalar> {
    pub name: String,
    pub op: LayerOp<T>,
    pub inputs: Vec<NodeId>,
}

/// Ordered layer graph with named parameters and marked stage outputs.
pub struct Model<T: Scalar> {
    pub descriptor: ModelDescriptor,
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) input_channels: usize,
    pub(crate) stage_outputs: Vec<NodeId>,
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Model({} layers, {} stage outputs, {:?})",
            self.nodes.len(),
            self.stage_outputs.len(),
            self.descriptor
        )
    }
}


impl<T: Scalar> Model<T> {
    /// Name and convolution spec (if any) per layer, in execution order.
    pub fn layer_views(&self) -> impl Iterator<Item = LayerView<'_>> {
        self.nodes.iter().map(|node| LayerView {
            name: &node.name,
            conv_spec: match &node.op {
                LayerOp::Conv { spec, .. } => Some(*spec),
                _ => None,
            },
        })
    }

    /// The input spatial size expected by `forward`, when fixed by the descriptor.
    pub fn expected_input_size(&self) -> Option<usize> {
        match &self.descriptor {
            ModelDescriptor::Network { config } => Some(config.input_size),
            ModelDescriptor::ContextOnly { map_size, .. } => Some(*map_size),
            _ => None,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn num_stage_outputs(&self) -> usize {
        self.stage_outputs.len()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.name.clone()).collect()
    }

    /// Parameter tensors in layer order (weight before bias within a layer).
    pub fn parameters(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let LayerOp::Conv { weight, bias, .. } = &node.op {
                out.push(weight.clone());
                if let Some(b) = bias {
                    out.push(b.clone());
                }
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            if let LayerOp::Conv { weight, bias, .. } = &mut node.op {
                out.push(weight);
                if let Some(b) = bias {
                    out.push(b);
                }
            }
        }
        out
    }

    /// (name, tensor) pairs, names suffixed `.weight` / `.bias`.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let LayerOp::Conv { weight, bias, .. } = &node.op {
                out.push((format!("{}.weight", node.name), weight.clone()));
                if let Some(b) = bias {
                    out.push((format!("{}.bias", node.name), b.clone()));
                }
            }
        }
        out
    }

    pub fn param_scalar_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Copies every parameter whose name and shape match a parameter of
    /// `src`; other parameters are left untouched. Returns the number of
    /// tensors copied.
    pub fn copy_matching_parameters_from(&mut self, src: &Model<T>) -> usize {
        let by_name: std::collections::HashMap<String, Tensor<T>> =
            src.named_parameters().into_iter().collect();
        let mut copied = 0;
        for node in &mut self.nodes {
            if let LayerOp::Conv { weight, bias, .. } = &mut node.op {
                if let Some(other) = by_name.get(&format!("{}.weight", node.name)) {
                    if other.shape() == weight.shape() {
                        *weight = Tensor::param(other.shape().to_vec(), other.data().to_vec())
                            .expect("shape matches");
                        copied += 1;
                    }
                }
                if let Some(b) = bias {
                    if let Some(other) = by_name.get(&format!("{}.bias", node.name)) {
                        if other.shape() == b.shape() {
                            *b = Tensor::param(other.shape().to_vec(), other.data().to_vec())
                                .expect("shape matches");
                            copied += 1;
                        }
                    }
                }
            }
        }
        copied
    }

    fn check_input(&self, batch: &Tensor<T>) -> ModelResult<()> {
        let shape = batch.shape();
        let ok = shape.len() == 4
            && shape[1] == self.input_channels
            && self
                .expected_input_size()
                .map(|s| shape[2] == s && shape[3] == s)
                .unwrap_or(true);
        if !ok {
            let s = self.expected_input_size().unwrap_or(0);
            return Err(ModelError::WrongInput {
                expected: vec![shape.first().copied().unwrap_or(1), self.input_channels, s, s],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the graph, reporting every node's output (and wall time) to `observe`.
    pub fn execute_with(
        &self,
        batch: &Tensor<T>,
        mut observe: impl FnMut(usize, &str, &Tensor<T>, std::time::Duration),
    ) -> ModelResult<Vec<Tensor<T>>> {
        self.check_input(batch)?;
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            let started = std::time::Instant::now();
            let fetch = |id: &NodeId| values[id.0].clone().expect("graph is topologically ordered");
            let out = match &node.op {
                LayerOp::Input => batch.clone(),
                LayerOp::Conv {
                    spec,
                    weight,
                    bias,
                    fused_relu,
                } => {
                    let x = fetch(&node.inputs[0]);
                    let y = conv2d(&x, weight, bias.as_ref(), spec)?;
                    if *fused_relu {
                        relu(&y)
                    } else {
                        y
                    }
                }
                LayerOp::Pool { kind, kernel, stride } => {
                    pool2d(&fetch(&node.inputs[0]), *kind, *kernel, *stride)?
                }
                LayerOp::Upsample { factor, mode } => upsample(&fetch(&node.inputs[0]), *factor, *mode)?,
                LayerOp::Concat => {
                    let xs: Vec<Tensor<T>> = node.inputs.iter().map(fetch).collect();
                    concat(&xs, 1)?
                }
                LayerOp::Add => {
                    let a = fetch(&node.inputs[0]);
                    let b = fetch(&node.inputs[1]);
                    add(&a, &b)?
                }
            };
            observe(idx, &node.name, &out, started.elapsed());
            values[idx] = Some(out);
        }
        Ok(self
            .stage_outputs
            .iter()
            .map(|id| values[id.0].clone().expect("stage output computed"))
            .collect())
    }

    /// Forward pass; returns one heatmap tensor per stage (initial first).
    pub fn forward(&self, batch: &Tensor<T>) -> ModelResult<Vec<Tensor<T>>> {
        self.execute_with(batch, |_, _, _, _| {})
    }

    /// Name of the first layer producing a non-finite value, if any.
    pub fn first_non_finite_layer(&self, batch: &Tensor<T>) -> ModelResult<Option<String>> {
        let mut found: Option<String> = None;
        crate::tensor::no_grad(|| {
            self.execute_with(batch, |_, name, out, _| {
                if found.is_none() && !out.is_finite() {
                    found = Some(name.to_string());
                }
            })
        })?;
        Ok(found)
    }

    /// Per-node output shapes for a given input shape, without running data.
    pub fn infer_shapes(&self, input_shape: &[usize]) -> ModelResult<Vec<Vec<usize>>> {
        use crate::tensor::conv_output_extent;
        if input_shape.len() != 4 || input_shape[1] != self.input_channels {
            return Err(ModelError::WrongInput {
                expected: vec![0, self.input_channels, 0, 0],
                got: input_shape.to_vec(),
            });
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape = match &node.op {
                LayerOp::Input => input_shape.to_vec(),
                LayerOp::Conv { spec, .. } => {
                    let s = &shapes[node.inputs[0].0];
                    let h = conv_output_extent(s[2], spec.kernel.0, spec.stride.0, spec.padding.0, spec.dilation)?;
                    let w = conv_output_extent(s[3], spec.kernel.1, spec.stride.1, spec.padding.1, spec.dilation)?;
                    vec![s[0], spec.out_channels, h, w]
                }
                LayerOp::Pool { kernel, stride, .. } => {
                    let s = &shapes[node.inputs[0].0];
                    vec![
                        s[0],
                        s[1],
                        (s[2] - kernel.0) / stride.0 + 1,
                        (s[3] - kernel.1) / stride.1 + 1,
                    ]
                }
                LayerOp::Upsample { factor, .. } => {
                    let s = &shapes[node.inputs[0].0];
                    vec![s[0], s[1], s[2] * factor, s[3] * factor]
                }
                LayerOp::Concat => {
                    let first = shapes[node.inputs[0].0].clone();
                    let channels = node.inputs.iter().map(|id| shapes[id.0][1]).sum();
                    vec![first[0], channels, first[2], first[3]]
                }
                LayerOp::Add => shapes[node.inputs[0].0].clone(),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

/// Incremental graph builder with seeded fan-in Gaussian weight init.
pub struct ModelBuilder<T: Scalar> {
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> ModelBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ModelBuilder {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            _marker: std::marker::PhantomData,
        }
    }

    fn push(&mut self, name: impl Into<String>, op: LayerOp<T>, inputs: Vec<NodeId>) -> NodeId {
        for id in &inputs {
            assert!(id.0 < self.nodes.len(), "inputs must precede the node");
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
        });
        id
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(name, LayerOp::Input, vec![])
    }

    /// Convolution with random fan-in-scaled Gaussian weights and zero bias.
    pub fn conv(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        spec: ConvSpec,
        fused_relu: bool,
    ) -> NodeId {
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data: Vec<T> = (0..spec.weight_count())
            .map(|_| T::cast(normal.sample(&mut self.rng)))
            .collect();
        let weight = Tensor::param(
            vec![
                spec.out_channels,
                spec.in_channels / spec.groups,
                spec.kernel.0,
                spec.kernel.1,
            ],
            data,
        )
        .expect("weight shape consistent");
        let bias = spec.has_bias.then(|| {
            Tensor::param(vec![spec.out_channels], vec![T::zero(); spec.out_channels])
                .expect("bias shape consistent")
        });
        self.push(
            name,
            LayerOp::Conv {
                spec,
                weight,
                bias,
                fused_relu,
            },
            vec![input],
        )
    }

    /// Convolution with explicit parameter values (for probes and tests).
    pub fn conv_from(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        spec: ConvSpec,
        fused_relu: bool,
        weight: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> NodeId {
        let weight = Tensor::param(
            vec![
                spec.out_channels,
                spec.in_channels / spec.groups,
                spec.kernel.0,
                spec.kernel.1,
            ],
            weight,
        )
        .expect("weight data matches spec");
        let bias = bias.map(|b| Tensor::param(vec![spec.out_channels], b).expect("bias data matches spec"));
        self.push(
            name,
            LayerOp::Conv {
                spec,
                weight,
                bias,
                fused_relu,
            },
            vec![input],
        )
    }

    pub fn pool(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        kind: PoolKind,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> NodeId {
        self.push(name, LayerOp::Pool { kind, kernel, stride }, vec![input])
    }

    pub fn upsample(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        factor: usize,
        mode: UpsampleMode,
    ) -> NodeId {
        self.push(name, LayerOp::Upsample { factor, mode }, vec![input])
    }

    pub fn concat(&mut self, name: impl Into<String>, inputs: Vec<NodeId>) -> NodeId {
        self.push(name, LayerOp::Concat, inputs)
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, LayerOp::Add, vec![a, b])
    }

    pub fn finish(
        self,
        descriptor: ModelDescriptor,
        input_channels: usize,
        stage_outputs: Vec<NodeId>,
    ) -> Model<T> {
        let mut seen = std::collections::HashSet::new();
        for node in &self.nodes {
            assert!(seen.insert(node.name.clone()), "duplicate layer name {}", node.name);
        }
        Model {
            descriptor,
            nodes: self.nodes,
            input_channels,
            stage_outputs,
        }
    }
}

fn scaled_channels(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(4)
}

/// Depthwise-separable feature extractor. Downsampling points are conv0 and
/// the dw convs of blocks 2, 4 and 6; for output strides below 16 the later
/// downsampling strides are removed and subsequent dw convs get their
/// dilation doubled.
fn build_backbone<T: Scalar>(
    b: &mut ModelBuilder<T>,
    input: NodeId,
    width: f64,
    output_stride: usize,
) -> (NodeId, usize) {
    let base = [32, 64, 64, 128, 128, 256, 256, 256];
    let ch: Vec<usize> = base.iter().map(|&c| scaled_channels(c, width)).collect();
    // Block index (1-based) of each downsampling dw conv, after conv0.
    let downsamples = [2usize, 4, 6];
    let keep = match output_stride {
        16 => 3,
        8 => 2,
        4 => 1,
        _ => unreachable!("validated output_stride"),
    };

    let spec0 = ConvSpec::new(3, ch[0], (3, 3)).with_stride((2, 2)).with_padding((1, 1));
    let mut node = b.conv("backbone.conv0", input, spec0, true);
    let mut prev_c = ch[0];
    let mut dilation = 1usize;
    let mut removed = 0usize;
    for i in 1..=7 {
        let is_down = downsamples.contains(&i);
        let stride = if is_down && downsamples.iter().position(|&d| d == i).unwrap() < keep {
            (2, 2)
        } else {
            (1, 1)
        };
        let dw = ConvSpec::new(prev_c, prev_c, (3, 3))
            .with_groups(prev_c)
            .with_stride(stride)
            .with_dilation(dilation)
            .with_padding((dilation, dilation));
        node = b.conv(format!("backbone.ds{i}.dw"), node, dw, true);
        let pw = ConvSpec::new(prev_c, ch[i], (1, 1));
        node = b.conv(format!("backbone.ds{i}.pw"), node, pw, true);
        prev_c = ch[i];
        if is_down && stride == (1, 1) {
            removed += 1;
            dilation = 1 << removed;
        }
    }
    (node, prev_c)
}

/// A stage block: 1×1 reduce, 3×3, dilated 3×3, residual sum. The two 3×3
/// convolutions give the block a 7×7 effective receptive field.
pub(crate) fn add_refinement_block<T: Scalar>(
    b: &mut ModelBuilder<T>,
    prefix: &str,
    input: NodeId,
    in_channels: usize,
    channels: usize,
) -> NodeId {
    let reduce = b.conv(
        format!("{prefix}.reduce"),
        input,
        ConvSpec::new(in_channels, channels, (1, 1)),
        true,
    );
    let conv = b.conv(
        format!("{prefix}.conv"),
        reduce,
        ConvSpec::new(channels, channels, (3, 3)).same_padding(),
        true,
    );
    let dilated = b.conv(
        format!("{prefix}.dilated"),
        conv,
        ConvSpec::new(channels, channels, (3, 3)).with_dilation(2).same_padding(),
        true,
    );
    b.add(format!("{prefix}.sum"), reduce, dilated)
}

fn add_stage<T: Scalar>(
    b: &mut ModelBuilder<T>,
    prefix: &str,
    input: NodeId,
    in_channels: usize,
    channels: usize,
    heatmap_channels: usize,
) -> NodeId {
    let b1 = add_refinement_block(b, &format!("{prefix}.block0"), input, in_channels, channels);
    let b2 = add_refinement_block(b, &format!("{prefix}.block1"), b1, channels, channels);
    let b3 = add_refinement_block(b, &format!("{prefix}.block2"), b2, channels, channels);
    b.conv(
        format!("{prefix}.head"),
        b3,
        ConvSpec::new(channels, heatmap_channels, (1, 1)),
        false,
    )
}

fn build_network<T: Scalar>(
    config: &ModelConfig,
    seed: u64,
    identity_context: bool,
) -> ModelResult<Model<T>> {
    config.validate()?;
    let mut b = ModelBuilder::new(seed);
    let input = b.input("input");
    let (backbone, backbone_ch) = build_backbone(&mut b, input, config.backbone_width, config.output_stride);
    let feat_c = config.feature_channels;
    let features = b.conv(
        "reduce",
        backbone,
        ConvSpec::new(backbone_ch, feat_c, (1, 1)),
        true,
    );
    let k = config.heatmap_channels();

    let mut stage_outputs = Vec::with_capacity(1 + config.num_refinement_stages);
    let initial = add_stage(&mut b, "initial", features, feat_c, feat_c, k);
    stage_outputs.push(initial);

    let mut prev = initial;
    for s in 1..=config.num_refinement_stages {
        let prefix = format!("stage{s}");
        let cat = b.concat(format!("{prefix}.cat"), vec![features, prev]);
        let cat_c = feat_c + k;
        let (stage_in, stage_in_c) = match config.context.kind {
            ContextKind::None => (cat, cat_c),
            kind if identity_context => (
                context::add_context_module(
                    &mut b,
                    &format!("{prefix}.ctx"),
                    cat,
                    cat_c,
                    cat_c,
                    config.heatmap_size,
                    kind,
                    &config.context,
                )?,
                cat_c,
            ),
            kind => (
                context::add_context_module(
                    &mut b,
                    &format!("{prefix}.ctx"),
                    cat,
                    cat_c,
                    feat_c,
                    config.heatmap_size,
                    kind,
                    &config.context,
                )?,
                feat_c,
            ),
        };
        let out = add_stage(&mut b, &prefix, stage_in, stage_in_c, feat_c, k);
        stage_outputs.push(out);
        prev = out;
    }

    let descriptor = if identity_context {
        ModelDescriptor::Custom
    } else {
        ModelDescriptor::Network { config: config.clone() }
    };
    Ok(b.finish(descriptor, 3, stage_outputs))
}

/// Builds the full network: backbone, feature reduction, initial stage, and
/// `num_refinement_stages` refinement stages whose inputs are the features
/// concatenated with the previous stage's heatmaps, optionally passed through
/// the configured context module.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> ModelResult<Model<T>> {
    build_network(config, seed, false)
}

/// Receptive-field harness variant: the context module is built with
/// out_channels == in_channels and inserted ahead of each refinement stage,
/// so every other layer keeps the exact name and shape it has in the
/// context-free baseline. Combined with
/// [`Model::copy_matching_parameters_from`] this yields a model that differs
/// from a trained baseline only by the added module.
pub fn build_model_with_identity_context<T: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> ModelResult<Model<T>> {
    if config.context.kind == ContextKind::None {
        return Err(ModelError::InvalidConfig(
            "identity-context harness needs a context kind".into(),
        ));
    }
    build_network(config, seed, true)
}
