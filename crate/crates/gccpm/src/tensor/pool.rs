//! Average and max pooling.

use crate::scalar::Scalar;

use super::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Pooling over non-padded windows. Average pooling splits the gradient
/// uniformly over the window; max pooling routes it to the first maximal
/// element in row-major window order.
pub fn pool2d<T: Scalar>(
    input: &Tensor<T>,
    kind: PoolKind,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> TensorResult<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "pool2d input",
            expected: 4,
            shape: shape.to_vec(),
        });
    }
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(TensorError::InvalidSpec {
            context: "pool2d",
            message: "kernel and stride extents must be positive".into(),
        });
    }
    let (n_b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if kernel.0 > h || kernel.1 > w {
        return Err(TensorError::InvalidSpec {
            context: "pool2d",
            message: format!("kernel {kernel:?} larger than input {h}x{w}"),
        });
    }
    let out_h = (h - kernel.0) / stride.0 + 1;
    let out_w = (w - kernel.1) / stride.1 + 1;

    let planes = n_b * c;
    let in_plane = h * w;
    let out_plane = out_h * out_w;
    let data_in = input.data();
    let mut out = vec![T::zero(); planes * out_plane];
    // For max pooling, remember the winning input offset per output cell.
    let mut argmax = if matches!(kind, PoolKind::Max) {
        vec![0usize; planes * out_plane]
    } else {
        Vec::new()
    };

    for p in 0..planes {
        let in_map = &data_in[p * in_plane..(p + 1) * in_plane];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let y0 = oy * stride.0;
                let x0 = ox * stride.1;
                match kind {
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for ky in 0..kernel.0 {
                            for kx in 0..kernel.1 {
                                acc = acc + in_map[(y0 + ky) * w + x0 + kx];
                            }
                        }
                        let denom = T::from_usize(kernel.0 * kernel.1).expect("kernel size fits scalar");
                        out[p * out_plane + oy * out_w + ox] = acc / denom;
                    }
                    PoolKind::Max => {
                        let mut best = in_map[y0 * w + x0];
                        let mut best_at = y0 * w + x0;
                        for ky in 0..kernel.0 {
                            for kx in 0..kernel.1 {
                                let at = (y0 + ky) * w + x0 + kx;
                                if in_map[at] > best {
                                    best = in_map[at];
                                    best_at = at;
                                }
                            }
                        }
                        out[p * out_plane + oy * out_w + ox] = best;
                        argmax[p * out_plane + oy * out_w + ox] = best_at;
                    }
                }
            }
        }
    }

    let out_shape = vec![n_b, c, out_h, out_w];
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![input.clone()],
        Box::new(move |parents, g| {
            let mut gin = vec![T::zero(); parents[0].numel()];
            match kind {
                PoolKind::Avg => {
                    let denom = T::from_usize(kernel.0 * kernel.1).expect("kernel size fits scalar");
                    for p in 0..planes {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let gv = g[p * out_plane + oy * out_w + ox] / denom;
                                let y0 = oy * stride.0;
                                let x0 = ox * stride.1;
                                for ky in 0..kernel.0 {
                                    for kx in 0..kernel.1 {
                                        let at = p * in_plane + (y0 + ky) * w + x0 + kx;
                                        gin[at] = gin[at] + gv;
                                    }
                                }
                            }
                        }
                    }
                }
                PoolKind::Max => {
                    for (i, &src) in argmax.iter().enumerate() {
                        let p = i / out_plane;
                        gin[p * in_plane + src] = gin[p * in_plane + src] + g[i];
                    }
                }
            }
            vec![Some(gin)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_of_ones_is_one() {
        let input = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0);
        let out = pool2d(&input, PoolKind::Avg, (2, 2), (2, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn max_picks_largest() {
        let input = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pool2d(&input, PoolKind::Max, (2, 2), (2, 2)).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn block_means_match_bruteforce() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(vec![1, 1, 32, 32], data.clone()).unwrap();
        let out = pool2d(&input, PoolKind::Avg, (16, 16), (16, 16)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        for by in 0..2 {
            for bx in 0..2 {
                let mut acc = 0.0;
                for y in 0..16 {
                    for x in 0..16 {
                        acc += data[(by * 16 + y) * 32 + bx * 16 + x];
                    }
                }
                let expected = acc / 256.0;
                assert!((out.data()[by * 2 + bx] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_larger_than_input_errors() {
        let input = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        assert!(pool2d(&input, PoolKind::Avg, (3, 3), (1, 1)).is_err());
    }

    #[test]
    fn max_grad_ties_break_to_first_index() {
        let input = Tensor::<f64>::param(vec![1, 1, 1, 2], vec![5.0, 5.0]).unwrap();
        let out = pool2d(&input, PoolKind::Max, (1, 2), (1, 1)).unwrap();
        super::super::sum_all(&out).backward().unwrap();
        assert_eq!(input.grad().unwrap(), vec![1.0, 0.0]);
    }
}
