//! 2-D convolution with stride, zero padding, dilation and groups.
//!
//! Each output value is the dilated sum `y[i] = Σ_k x[i + r·k]·w[k]` over the
//! kernel taps, evaluated on the zero-padded input, plus an optional bias.

use crate::scalar::Scalar;

use super::{for_each_chunk, Tensor, TensorError, TensorResult};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// Sampling rate r; 1 is an ordinary convolution.
    pub dilation: usize,
    pub groups: usize,
    pub padding: (usize, usize),
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            dilation: 1,
            groups: 1,
            padding: (0, 0),
            has_bias: true,
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// Symmetric padding that keeps odd-kernel maps the same size at stride 1:
    /// p = r·(k−1)/2 per axis.
    pub fn same_padding(mut self) -> Self {
        self.padding = (
            self.dilation * (self.kernel.0 - 1) / 2,
            self.dilation * (self.kernel.1 - 1) / 2,
        );
        self
    }

    pub fn validate(&self) -> TensorResult<()> {
        let fail = |message: String| TensorError::InvalidSpec {
            context: "conv2d",
            message,
        };
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(fail("channel counts must be positive".into()));
        }
        if self.groups == 0 || self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0
        {
            return Err(fail(format!(
                "channels ({} in, {} out) must be divisible by groups ({})",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.dilation == 0 {
            return Err(fail("dilation must be >= 1".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(fail("kernel and stride extents must be positive".into()));
        }
        Ok(())
    }

    /// Scalar parameter count: Cout·(Cin/groups)·kh·kw, plus Cout if biased.
    pub fn param_count(&self) -> usize {
        let weights = self.out_channels * (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1;
        weights + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1
    }
}

/// Closed-form output extent: floor((in + 2p − r·(k−1) − 1)/s) + 1.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> TensorResult<usize> {
    let span = (input + 2 * padding) as i64 - (dilation * (kernel - 1) + 1) as i64;
    if span < 0 {
        return Err(TensorError::EmptyOutput {
            context: "conv2d",
            input,
            computed: span / stride as i64 + 1,
        });
    }
    Ok((span / stride as i64) as usize + 1)
}

/// Valid output range `[start, end)` along one axis for kernel offset
/// `k_off = k·r − p`, so that the sampled input index stays in bounds.
fn valid_out_range(k_off: i64, stride: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let s = stride as i64;
    let start = if k_off >= 0 { 0 } else { (-k_off + s - 1) / s };
    let last_in = in_extent as i64 - 1 - k_off;
    if last_in < 0 {
        return (0, 0);
    }
    let end = (last_in / s + 1).min(out_extent as i64);
    if end <= start {
        (0, 0)
    } else {
        (start as usize, end as usize)
    }
}

struct ConvDims {
    batch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    cin_per_group: usize,
    cout_per_group: usize,
}

fn infer_dims<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> TensorResult<ConvDims> {
    spec.validate()?;
    let ishape = input.shape();
    if ishape.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "conv2d input",
            expected: 4,
            shape: ishape.to_vec(),
        });
    }
    let cin_per_group = spec.in_channels / spec.groups;
    let expected_w = vec![spec.out_channels, cin_per_group, spec.kernel.0, spec.kernel.1];
    if weights.shape() != expected_w.as_slice() {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d weights",
            left: weights.shape().to_vec(),
            right: expected_w,
        });
    }
    if ishape[1] != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d input channels",
            left: ishape.to_vec(),
            right: vec![ishape[0], spec.in_channels, ishape[2], ishape[3]],
        });
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d bias",
                left: b.shape().to_vec(),
                right: vec![spec.out_channels],
            });
        }
    }
    if spec.has_bias != bias.is_some() {
        return Err(TensorError::InvalidSpec {
            context: "conv2d",
            message: format!("has_bias={} but bias told {}", spec.has_bias, bias.is_some()),
        });
    }
    let out_h = conv_output_extent(ishape[2], spec.kernel.0, spec.stride.0, spec.padding.0, spec.dilation)?;
    let out_w = conv_output_extent(ishape[3], spec.kernel.1, spec.stride.1, spec.padding.1, spec.dilation)?;
    Ok(ConvDims {
        batch: ishape[0],
        in_h: ishape[2],
        in_w: ishape[3],
        out_h,
        out_w,
        cin_per_group,
        cout_per_group: spec.out_channels / spec.groups,
    })
}

fn forward_data<T: Scalar>(
    input: &[T],
    weights: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    d: &ConvDims,
) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let r = spec.dilation;
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let w_per_out = d.cin_per_group * kh * kw;

    let mut out = vec![T::zero(); d.batch * spec.out_channels * out_plane];
    for_each_chunk(&mut out, out_plane, |idx, out_map| {
        let n = idx / spec.out_channels;
        let co = idx % spec.out_channels;
        let group = co / d.cout_per_group;
        if let Some(b) = bias {
            out_map.fill(b[co]);
        }
        let in_base = n * spec.in_channels * in_plane + group * d.cin_per_group * in_plane;
        let w_base = co * w_per_out;
        for ci in 0..d.cin_per_group {
            let in_map = &input[in_base + ci * in_plane..in_base + (ci + 1) * in_plane];
            for ky in 0..kh {
                let y_off = (ky * r) as i64 - ph as i64;
                let (oh0, oh1) = valid_out_range(y_off, sh, d.in_h, d.out_h);
                for kx in 0..kw {
                    let w = weights[w_base + ci * kh * kw + ky * kw + kx];
                    if w == T::zero() {
                        continue;
                    }
                    let x_off = (kx * r) as i64 - pw as i64;
                    let (ow0, ow1) = valid_out_range(x_off, sw, d.in_w, d.out_w);
                    if ow1 <= ow0 {
                        continue;
                    }
                    for oh in oh0..oh1 {
                        let ih = (oh * sh) as i64 + y_off;
                        let in_row = &in_map[ih as usize * d.in_w..(ih as usize + 1) * d.in_w];
                        let out_row = &mut out_map[oh * d.out_w + ow0..oh * d.out_w + ow1];
                        let iw0 = (ow0 * sw) as i64 + x_off;
                        if sw == 1 {
                            let src = &in_row[iw0 as usize..iw0 as usize + (ow1 - ow0)];
                            for (o, &i) in out_row.iter_mut().zip(src) {
                                *o = *o + w * i;
                            }
                        } else {
                            for (k, o) in out_row.iter_mut().enumerate() {
                                let iw = iw0 as usize + k * sw;
                                *o = *o + w * in_row[iw];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn backward_data<T: Scalar>(
    input: &[T],
    weights: &[T],
    gout: &[T],
    spec: &ConvSpec,
    d: &ConvDims,
    want_input: bool,
    want_weights: bool,
    want_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let r = spec.dilation;
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let w_per_out = d.cin_per_group * kh * kw;

    let grad_bias = want_bias.then(|| {
        (0..spec.out_channels)
            .map(|co| {
                let mut acc = T::zero();
                for n in 0..d.batch {
                    let base = (n * spec.out_channels + co) * out_plane;
                    for &g in &gout[base..base + out_plane] {
                        acc = acc + g;
                    }
                }
                acc
            })
            .collect()
    });

    let grad_weights = want_weights.then(|| {
        let mut gw = vec![T::zero(); weights.len()];
        for_each_chunk(&mut gw, w_per_out, |co, gw_out| {
            let group = co / d.cout_per_group;
            for n in 0..d.batch {
                let g_map = &gout[(n * spec.out_channels + co) * out_plane..][..out_plane];
                let in_base = n * spec.in_channels * in_plane + group * d.cin_per_group * in_plane;
                for ci in 0..d.cin_per_group {
                    let in_map = &input[in_base + ci * in_plane..][..in_plane];
                    for ky in 0..kh {
                        let y_off = (ky * r) as i64 - ph as i64;
                        let (oh0, oh1) = valid_out_range(y_off, sh, d.in_h, d.out_h);
                        for kx in 0..kw {
                            let x_off = (kx * r) as i64 - pw as i64;
                            let (ow0, ow1) = valid_out_range(x_off, sw, d.in_w, d.out_w);
                            if ow1 <= ow0 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oh in oh0..oh1 {
                                let ih = ((oh * sh) as i64 + y_off) as usize;
                                let g_row = &g_map[oh * d.out_w + ow0..oh * d.out_w + ow1];
                                let iw0 = ((ow0 * sw) as i64 + x_off) as usize;
                                if sw == 1 {
                                    let in_row = &in_map[ih * d.in_w + iw0..][..ow1 - ow0];
                                    for (&g, &i) in g_row.iter().zip(in_row) {
                                        acc = acc + g * i;
                                    }
                                } else {
                                    for (k, &g) in g_row.iter().enumerate() {
                                        acc = acc + g * in_map[ih * d.in_w + iw0 + k * sw];
                                    }
                                }
                            }
                            gw_out[ci * kh * kw + ky * kw + kx] = gw_out[ci * kh * kw + ky * kw + kx] + acc;
                        }
                    }
                }
            }
        });
        gw
    });

    let grad_input = want_input.then(|| {
        let mut gin = vec![T::zero(); input.len()];
        for_each_chunk(&mut gin, spec.in_channels * in_plane, |n, gin_sample| {
                for co in 0..spec.out_channels {
                    let group = co / d.cout_per_group;
                    let g_map = &gout[(n * spec.out_channels + co) * out_plane..][..out_plane];
                    let w_base = co * w_per_out;
                    for ci in 0..d.cin_per_group {
                        let c = group * d.cin_per_group + ci;
                        let gin_map = &mut gin_sample[c * in_plane..(c + 1) * in_plane];
                        for ky in 0..kh {
                            let y_off = (ky * r) as i64 - ph as i64;
                            let (oh0, oh1) = valid_out_range(y_off, sh, d.in_h, d.out_h);
                            for kx in 0..kw {
                                let w = weights[w_base + ci * kh * kw + ky * kw + kx];
                                if w == T::zero() {
                                    continue;
                                }
                                let x_off = (kx * r) as i64 - pw as i64;
                                let (ow0, ow1) = valid_out_range(x_off, sw, d.in_w, d.out_w);
                                if ow1 <= ow0 {
                                    continue;
                                }
                                for oh in oh0..oh1 {
                                    let ih = ((oh * sh) as i64 + y_off) as usize;
                                    let g_row = &g_map[oh * d.out_w + ow0..oh * d.out_w + ow1];
                                    let iw0 = ((ow0 * sw) as i64 + x_off) as usize;
                                    if sw == 1 {
                                        let gin_row = &mut gin_map[ih * d.in_w + iw0..][..ow1 - ow0];
                                        for (o, &g) in gin_row.iter_mut().zip(g_row) {
                                            *o = *o + w * g;
                                        }
                                    } else {
                                        for (k, &g) in g_row.iter().enumerate() {
                                            let iw = iw0 + k * sw;
                                            gin_map[ih * d.in_w + iw] = gin_map[ih * d.in_w + iw] + w * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        gin
    });

    (grad_input, grad_weights, grad_bias)
}

/// Dilated 2-D convolution. Gradient flows to input, weights and bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> TensorResult<Tensor<T>> {
    let dims = infer_dims(input, weights, bias, spec)?;
    let out = forward_data(input.data(), weights.data(), bias.map(|b| b.data()), spec, &dims);
    let out_shape = vec![dims.batch, spec.out_channels, dims.out_h, dims.out_w];

    let mut parents = vec![input.clone(), weights.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let spec = *spec;
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |parents, g| {
            let input = &parents[0];
            let weights = &parents[1];
            let has_bias = parents.len() == 3;
            let dims = infer_dims(input, weights, parents.get(2), &spec)
                .expect("shapes already validated in forward");
            let (gi, gw, gb) = backward_data(
                input.data(),
                weights.data(),
                g,
                &spec,
                &dims,
                true,
                true,
                has_bias,
            );
            let mut grads = vec![gi, gw];
            if has_bias {
                grads.push(gb);
            }
            grads
        }),
    ))
}
