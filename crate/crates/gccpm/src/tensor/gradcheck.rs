//! Central finite-difference oracle for analytic gradients.

use crate::scalar::Scalar;

use super::{no_grad, Tensor, TensorError, TensorResult};

/// Compares the analytic gradient of `f` (a map from inputs to a scalar)
/// against central finite differences at every input coordinate. Returns the
/// maximum of |analytic − numeric| / max(|analytic|, |numeric|, 1e−8).
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], epsilon: T) -> TensorResult<T>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> TensorResult<Tensor<T>>,
{
    let params: Vec<Tensor<T>> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape().to_vec(), t.data().to_vec()))
        .collect::<TensorResult<_>>()?;
    let loss = f(&params)?;
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<T>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();

    let floor = T::cast(1e-8);
    let two = T::cast(2.0);
    let mut worst = T::zero();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let eval = |delta: T| -> TensorResult<T> {
                let mut data = input.data().to_vec();
                data[j] = data[j] + delta;
                let mut probe: Vec<Tensor<T>> = inputs.to_vec();
                probe[i] = Tensor::from_vec(input.shape().to_vec(), data)?;
                let out = no_grad(|| f(&probe))?;
                Ok(out.data()[0])
            };
            let plus = eval(epsilon)?;
            let minus = eval(T::zero() - epsilon)?;
            let numeric = (plus - minus) / (two * epsilon);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, conv2d, mul, pool2d, relu, scale, sub, sum_all, ConvSpec, PoolKind};
    use rand::{Rng, SeedableRng};

    #[test]
    fn linear_function_is_exact_to_machine_precision() {
        let x = Tensor::<f64>::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = finite_diff_check(|ins| Ok(scale(&sum_all(&ins[0]), 3.0)), &[x], 1e-5).unwrap();
        assert!(err < 1e-9, "linear FD error too large: {err}");
    }

    #[test]
    fn conv_relu_mse_composite_passes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let input: Vec<f64> = (0..2 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let target: Vec<f64> = (0..3 * 25).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let target = Tensor::from_vec(vec![1, 3, 5, 5], target).unwrap();
        let spec = ConvSpec::new(2, 3, (3, 3)).same_padding();

        let inputs = [
            Tensor::from_vec(vec![1, 2, 5, 5], input).unwrap(),
            Tensor::from_vec(vec![3, 2, 3, 3], weights).unwrap(),
            Tensor::from_vec(vec![3], bias).unwrap(),
        ];
        let err = finite_diff_check(
            |ins| {
                let y = relu(&conv2d(&ins[0], &ins[1], Some(&ins[2]), &spec)?);
                let d = sub(&y, &target)?;
                Ok(sum_all(&mul(&d, &d)?))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "composite FD error too large: {err}");
    }

    #[test]
    fn max_pool_at_non_tie_point_passes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vec![1, 1, 4, 4], data).unwrap();
        let err = finite_diff_check(
            |ins| Ok(sum_all(&pool2d(&ins[0], PoolKind::Max, (2, 2), (2, 2))?)),
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max-pool FD error too large: {err}");
    }

    #[test]
    fn add_chain_passes() {
        let a = Tensor::<f64>::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![3], vec![-0.4, 0.5, 0.9]).unwrap();
        let err = finite_diff_check(
            |ins| Ok(sum_all(&mul(&add(&ins[0], &ins[1])?, &ins[0])?)),
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }
}
