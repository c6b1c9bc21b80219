//! Elementwise operations, reductions and concatenation.

use crate::scalar::Scalar;

use super::{contiguous_strides, Tensor, TensorError, TensorResult};

fn check_same_shape<T: Scalar>(
    context: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            context,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    check_same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x - y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g| {
            vec![
                Some(g.to_vec()),
                Some(g.iter().map(|&v| T::zero() - v).collect()),
            ]
        }),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    check_same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|parents, g| {
            let a = &parents[0];
            let b = &parents[1];
            let ga = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
            let gb = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * factor).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, g| vec![Some(g.iter().map(|&v| v * factor).collect())]),
    )
}

/// ReLU; the gradient at exactly 0 is 0.
pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .map(|&x| if x > T::zero() { x } else { T::zero() })
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|parents, g| {
            let grad = parents[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                .collect();
            vec![Some(grad)]
        }),
    )
}

/// Sum of all elements, as a shape-`[1]` scalar.
pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let total = a.data().iter().copied().sum();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![a.clone()],
        Box::new(|parents, g| {
            let n = parents[0].numel();
            vec![Some(vec![g[0]; n])]
        }),
    )
}

/// Concatenates along `axis`; all other extents must match.
pub fn concat<T: Scalar>(tensors: &[Tensor<T>], axis: usize) -> TensorResult<Tensor<T>> {
    let first = tensors.first().ok_or(TensorError::EmptyConcat)?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(TensorError::InvalidSpec {
            context: "concat",
            message: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    let mut out_shape = first.shape().to_vec();
    for t in &tensors[1..] {
        if t.shape().len() != rank {
            return Err(TensorError::ShapeMismatch {
                context: "concat",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        for (d, (&a, &b)) in first.shape().iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(TensorError::ShapeMismatch {
                    context: "concat",
                    left: first.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        out_shape[axis] += t.shape()[axis];
    }

    // outer = product of extents before axis, inner = product after.
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(total);
    for o in 0..outer {
        for t in tensors {
            let ext = t.shape()[axis];
            let chunk = ext * inner;
            let src = &t.data()[o * chunk..(o + 1) * chunk];
            data.extend_from_slice(src);
        }
    }

    let axis_extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    Ok(Tensor::from_op(
        out_shape,
        data,
        tensors.to_vec(),
        Box::new(move |parents, g| {
            let mut grads: Vec<Vec<T>> = parents.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            let mut offset = 0usize;
            let stride_total: usize = axis_extents.iter().map(|e| e * inner).sum();
            for (pi, &ext) in axis_extents.iter().enumerate() {
                let chunk = ext * inner;
                for o in 0..outer {
                    let src = &g[o * stride_total + offset..o * stride_total + offset + chunk];
                    grads[pi][o * chunk..(o + 1) * chunk].copy_from_slice(src);
                }
                offset += chunk;
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

// Keep the strides helper referenced from this module for index math reuse.
#[allow(dead_code)]
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    contiguous_strides(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::zeros(vec![2, 2]);
        assert_eq!(add(&x, &z).unwrap().data(), x.data());
    }

    #[test]
    fn relu_pair_reconstructs_abs() {
        // relu(x) + relu(-x) == |x|
        let x = Tensor::<f64>::from_vec(vec![4], vec![-3.0, -0.5, 0.0, 2.0]).unwrap();
        let neg = scale(&x, -1.0);
        let out = add(&relu(&x), &relu(&neg)).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| v.abs()).collect();
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2]);
        let b = Tensor::<f32>::zeros(vec![3]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn concat_channel_axis() {
        let a = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let out = concat(&[a, b], 1).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn concat_single_is_identity() {
        let a = Tensor::<f32>::from_vec(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let out = concat(std::slice::from_ref(&a), 0).unwrap();
        assert_eq!(out.shape(), a.shape());
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn concat_widths_accumulate() {
        let parts: Vec<Tensor<f32>> = [32usize, 32, 64]
            .iter()
            .map(|&c| Tensor::zeros(vec![1, c, 2, 2]))
            .collect();
        let out = concat(&parts, 1).unwrap();
        assert_eq!(out.shape()[1], 128);
    }

    #[test]
    fn concat_rejects_mismatched_nonaxis_extent() {
        let a = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(vec![1, 2, 5, 4]);
        assert!(concat(&[a, b], 1).is_err());
    }

    #[test]
    fn concat_grad_splits_back() {
        let a = Tensor::<f64>::param(vec![1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let b = Tensor::<f64>::param(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let cat = concat(&[a.clone(), b.clone()], 1).unwrap();
        let weights =
            Tensor::from_vec(vec![1, 3, 2, 2], (1..=12).map(|v| v as f64).collect()).unwrap();
        sum_all(&mul(&cat, &weights).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), (1..=8).map(|v| v as f64).collect::<Vec<_>>());
        assert_eq!(b.grad().unwrap(), (9..=12).map(|v| v as f64).collect::<Vec<_>>());
    }
}
