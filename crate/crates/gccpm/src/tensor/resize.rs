//! Spatial upsampling and bilinear resizing.

use crate::scalar::Scalar;

use super::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpsampleMode {
    Nearest,
    /// align-corners=false convention: source coordinate of output index i is
    /// (i + 0.5)·(in/out) − 0.5, clamped to the input range.
    Bilinear,
}

/// Source taps for one output index under align-corners=false.
fn bilinear_taps(out_extent: usize, in_extent: usize, i: usize) -> (usize, usize, f64) {
    let scale = in_extent as f64 / out_extent as f64;
    let src = (i as f64 + 0.5) * scale - 0.5;
    let src = src.max(0.0);
    let x0 = (src.floor() as usize).min(in_extent - 1);
    let x1 = (x0 + 1).min(in_extent - 1);
    let t = (src - x0 as f64).clamp(0.0, 1.0);
    (x0, x1, t)
}

/// Integer-factor spatial upsampling of an N×C×H×W tensor; differentiable.
pub fn upsample<T: Scalar>(
    input: &Tensor<T>,
    factor: usize,
    mode: UpsampleMode,
) -> TensorResult<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "upsample input",
            expected: 4,
            shape: shape.to_vec(),
        });
    }
    if factor == 0 {
        return Err(TensorError::InvalidSpec {
            context: "upsample",
            message: "factor must be >= 1".into(),
        });
    }
    if factor == 1 {
        // Identity, but still a node so gradients flow.
        return Ok(Tensor::from_op(
            shape.to_vec(),
            input.data().to_vec(),
            vec![input.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        ));
    }
    let (n_b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let planes = n_b * c;
    let data = input.data();
    let mut out = vec![T::zero(); planes * oh * ow];

    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                let src = &data[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y / factor;
                    for x in 0..ow {
                        dst[y * ow + x] = src[sy * w + x / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            for p in 0..planes {
                let src = &data[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..oh {
                    let (y0, y1, ty) = bilinear_taps(oh, h, y);
                    let ty = T::cast(ty);
                    for x in 0..ow {
                        let (x0, x1, tx) = bilinear_taps(ow, w, x);
                        let tx = T::cast(tx);
                        let one = T::one();
                        let top = src[y0 * w + x0] * (one - tx) + src[y0 * w + x1] * tx;
                        let bot = src[y1 * w + x0] * (one - tx) + src[y1 * w + x1] * tx;
                        dst[y * ow + x] = top * (one - ty) + bot * ty;
                    }
                }
            }
        }
    }

    Ok(Tensor::from_op(
        vec![n_b, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |parents, g| {
            let mut gin = vec![T::zero(); parents[0].numel()];
            match mode {
                UpsampleMode::Nearest => {
                    for p in 0..planes {
                        let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
                        let gdst = &mut gin[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            let sy = y / factor;
                            for x in 0..ow {
                                let at = sy * w + x / factor;
                                gdst[at] = gdst[at] + gsrc[y * ow + x];
                            }
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for p in 0..planes {
                        let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
                        let gdst = &mut gin[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            let (y0, y1, ty) = bilinear_taps(oh, h, y);
                            for x in 0..ow {
                                let (x0, x1, tx) = bilinear_taps(ow, w, x);
                                let gv = gsrc[y * ow + x];
                                let w00 = T::cast((1.0 - ty) * (1.0 - tx));
                                let w01 = T::cast((1.0 - ty) * tx);
                                let w10 = T::cast(ty * (1.0 - tx));
                                let w11 = T::cast(ty * tx);
                                gdst[y0 * w + x0] = gdst[y0 * w + x0] + gv * w00;
                                gdst[y0 * w + x1] = gdst[y0 * w + x1] + gv * w01;
                                gdst[y1 * w + x0] = gdst[y1 * w + x0] + gv * w10;
                                gdst[y1 * w + x1] = gdst[y1 * w + x1] + gv * w11;
                            }
                        }
                    }
                }
            }
            vec![Some(gin)]
        }),
    ))
}

/// Bilinear resize to an arbitrary spatial size. Inference-only: the result
/// does not participate in differentiation.
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, out_hw: (usize, usize)) -> TensorResult<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "resize input",
            expected: 4,
            shape: shape.to_vec(),
        });
    }
    let (n_b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(TensorError::ZeroExtent(vec![n_b, c, oh, ow]));
    }
    if (oh, ow) == (h, w) {
        return Tensor::from_vec(shape.to_vec(), input.data().to_vec());
    }
    let planes = n_b * c;
    let data = input.data();
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, ty) = bilinear_taps(oh, h, y);
            let ty = T::cast(ty);
            for x in 0..ow {
                let (x0, x1, tx) = bilinear_taps(ow, w, x);
                let tx = T::cast(tx);
                let one = T::one();
                let top = src[y0 * w + x0] * (one - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (one - tx) + src[y1 * w + x1] * tx;
                dst[y * ow + x] = top * (one - ty) + bot * ty;
            }
        }
    }
    Tensor::from_vec(vec![n_b, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_replicates_blocks() {
        let input = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = upsample(&input, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn factor_one_is_identity() {
        let input = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let out = upsample(&input, 1, mode).unwrap();
            assert_eq!(out.data(), input.data());
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let input = Tensor::<f64>::full(vec![1, 2, 3, 3], 0.7);
        let out = upsample(&input, 2, UpsampleMode::Bilinear).unwrap();
        for &v in out.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let resized = resize_bilinear(&input, (5, 7)).unwrap();
        for &v in resized.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }
}
