//! Value-level tensor operations (no gradient recording).
//!
//! The tape in [`crate::tape`] records the same kernels with backward rules.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }
}

/// `b` broadcasts against `a` when its shape is a suffix of `a`'s shape.
pub(crate) fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

pub(crate) fn ensure_finite<T: Element>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

pub fn elementwise<T: Element>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_broadcast(op.name(), a.shape(), b.shape())?;
    let bd = b.data();
    let mut data = Vec::with_capacity(a.numel());
    if !bd.is_empty() {
        for chunk in a.data().chunks_exact(bd.len()) {
            match op {
                BinaryOp::Add => data.extend(chunk.iter().zip(bd).map(|(&x, &y)| x + y)),
                BinaryOp::Sub => data.extend(chunk.iter().zip(bd).map(|(&x, &y)| x - y)),
                BinaryOp::Mul => data.extend(chunk.iter().zip(bd).map(|(&x, &y)| x * y)),
            }
        }
    }
    ensure_finite(op.name(), Tensor::new(a.shape().to_vec(), data)?)
}

pub(crate) fn matrix_dims(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::InvalidShape {
            shape: t.to_vec(),
            reason: format!("{op} expects a rank-2 tensor"),
        }),
    }
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul", a.shape())?;
    let (k2, n) = matrix_dims("matmul", b.shape())?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = kernels::matmul(a.data(), b.data(), m, k, n);
    ensure_finite("matmul", Tensor::new(vec![m, n], data)?)
}

/// `x·w + b` for `x: m×k`, `w: k×n`, `b: n`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("linear", x.shape())?;
    let (k2, n) = matrix_dims("linear", w.shape())?;
    if k != k2 || b.shape() != [n] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let data = kernels::matmul_bias(x.data(), w.data(), b.data(), m, k, n);
    ensure_finite("linear", Tensor::new(vec![m, n], data)?)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    if shape[axis] < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardize needs at least 2 elements along axis {axis}"
        )));
    }
    Ok(())
}

/// Zero-mean, unit population-std normalization along `axis`, regularized
/// by `eps` inside the square root. Has no learnable parameters.
pub fn standardize<T: Element>(x: &Tensor<T>, axis: usize, eps: T) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis)?;
    let (outer, len, inner) = kernels::axis_layout(x.shape(), axis);
    let (data, _) = kernels::standardize(x.data(), outer, len, inner, eps);
    ensure_finite("standardize", Tensor::new(x.shape().to_vec(), data)?)
}

/// Stride-`stride` average pooling of a 2-D map with same padding.
pub fn avg_pool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    if kernel < 1 || stride < 1 {
        return Err(Error::InvalidArgument(format!(
            "pooling kernel and stride must be >= 1 (got {kernel}, {stride})"
        )));
    }
    let (h, w) = matrix_dims("avg_pool2d", x.shape())?;
    let (data, oh, ow) = kernels::avg_pool2d(x.data(), h, w, kernel, stride);
    Tensor::new(vec![oh, ow], data)
}

/// Align-corners-false bilinear upsampling of a 2-D map.
pub fn bilinear_upsample<T: Element>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w) = matrix_dims("bilinear_upsample", x.shape())?;
    check_upsample_target((h, w), target)?;
    let data = kernels::bilinear(x.data(), h, w, 1, target.0, target.1);
    Tensor::new(vec![target.0, target.1], data)
}

pub(crate) fn check_upsample_target(src: (usize, usize), target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidArgument("zero target dimension".into()));
    }
    if target.0 < src.0 || target.1 < src.1 {
        return Err(Error::InvalidArgument(format!(
            "upsample target {target:?} smaller than source {src:?}"
        )));
    }
    Ok(())
}

/// Number of spatial positions a tensor's last axis is averaged over:
/// every axis except the trailing channel axis.
pub(crate) fn spatial_extent(shape: &[usize]) -> usize {
    match shape.split_last() {
        Some((_, lead)) => lead.iter().product(),
        None => 1,
    }
}

/// Squared L2 distance summed over channels and averaged over spatial
/// positions: `(1/(H·W)) · Σ ‖a − b‖²`.
pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sum = a
        .data()
        .iter()
        .zip(b.data())
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
    Ok(sum / T::from_f64(spatial_extent(a.shape()) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let z = elementwise(BinaryOp::Mul, &t(&[3], &[1., 2., 3.]), &t(&[3], &[0.; 3])).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
        let x = t(&[2, 2], &[1.5, -2., 0.25, 7.]);
        let same = elementwise(BinaryOp::Add, &x, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(same, x);
        let p = elementwise(BinaryOp::Mul, &t(&[2], &[0.5, -2.]), &t(&[2], &[4., 3.])).unwrap();
        assert_eq!(p.data(), &[2.0, -6.0]);
    }

    #[test]
    fn elementwise_broadcasts_trailing() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        let s = elementwise(BinaryOp::Sub, &a, &b).unwrap();
        assert_eq!(s.data(), &[-9., -18., -27., -6., -15., -24.]);
        assert!(elementwise(BinaryOp::Add, &a, &t(&[2], &[1., 1.])).is_err());
    }

    #[test]
    fn matmul_examples() {
        let x = t(&[2, 3], &[1., -2., 3., 0.5, 4., -1.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&eye, &x).unwrap(), x);
        let r = matmul(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 1], &[1., 1.])).unwrap();
        assert_eq!(r.data(), &[3.0, 7.0]);
        let z = matmul(&Tensor::<f64>::zeros(&[4, 3]), &x.clone().reshape(vec![3, 2]).unwrap()).unwrap();
        assert_eq!(z, Tensor::zeros(&[4, 2]));
        assert!(matmul(&x, &x).is_err());
    }

    #[test]
    fn standardize_examples() {
        let c = standardize(&t(&[4], &[3.; 4]), 0, 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let unit = standardize(&t(&[2], &[-1., 1.]), 0, 1e-12).unwrap();
        assert!((unit.data()[0] + 1.0).abs() < 1e-9 && (unit.data()[1] - 1.0).abs() < 1e-9);
        let s = standardize(&t(&[3], &[0., 2., 4.]), 0, 1e-12).unwrap();
        for (got, want) in s.data().iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!(standardize(&t(&[3], &[0., 2., 4.]), 1, 1e-5).is_err());
    }

    #[test]
    fn standardize_along_leading_axis() {
        // Columns [1,3] and [2,6] become [-1,1] each.
        let s = standardize(&t(&[2, 2], &[1., 2., 3., 6.]), 0, 1e-12).unwrap();
        let want = [-1.0, -1.0, 1.0, 1.0];
        assert!(s.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn avg_pool_examples() {
        let c = avg_pool2d(&Tensor::<f64>::full(&[5, 3], 2.5), 3, 1).unwrap();
        assert!(c.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(avg_pool2d(&x, 1, 1).unwrap(), x);
        let mut one = Tensor::<f64>::zeros(&[4, 4]);
        one.data_mut()[0] = 1.0;
        let p = avg_pool2d(&one, 2, 1).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.data()[0], 0.25);
        assert!(avg_pool2d(&one, 0, 1).is_err());
    }

    #[test]
    fn avg_pool_edge_windows_use_in_bounds_count() {
        let mut x = Tensor::<f64>::zeros(&[3, 3]);
        x.data_mut()[8] = 9.0;
        let p = avg_pool2d(&x, 3, 1).unwrap();
        // Corner window (2,2) covers rows 1..3, cols 1..3: four cells.
        assert_eq!(p.data()[8], 9.0 / 4.0);
        assert_eq!(p.data()[4], 1.0);
        let strided = avg_pool2d(&x, 2, 2).unwrap();
        assert_eq!(strided.shape(), &[2, 2]);
    }

    #[test]
    fn bilinear_examples() {
        let c = bilinear_upsample(&Tensor::<f64>::full(&[3, 2], 0.7), (7, 5)).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let x = t(&[2, 3], &[1., 5., 2., 0., -1., 3.]);
        assert_eq!(bilinear_upsample(&x, (2, 3)).unwrap(), x);
        let up = bilinear_upsample(&t(&[2, 2], &[0., 1., 0., 1.]), (4, 4)).unwrap();
        for r in 0..4 {
            let row = &up.data()[r * 4..r * 4 + 4];
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
        // Hand-computed: column taps at 0, 0.25, 0.75, 1.
        assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert!(bilinear_upsample(&x, (0, 4)).is_err());
        assert!(bilinear_upsample(&x, (1, 4)).is_err());
    }

    #[test]
    fn mse_examples() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mse(&t(&[2], &[1., 0.]), &t(&[2], &[0., 0.])).unwrap(), 1.0);
        assert_eq!(mse(&t(&[1, 1, 2], &[1., 0.]), &t(&[1, 1, 2], &[0., 0.])).unwrap(), 1.0);
        // 2 positions, 2 channels: (1 + 4 + 0 + 9) / 2.
        assert_eq!(mse(&t(&[2, 2], &[1., 2., 0., 3.]), &Tensor::zeros(&[2, 2])).unwrap(), 7.0);
        assert!(mse(&x, &Tensor::zeros(&[3, 2])).is_err());
    }

    proptest! {
        #[test]
        fn standardize_moments(data in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
            let spread = data.iter().cloned().fold(f64::MIN, f64::max) - data.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let n = data.len();
            let s = standardize(&Tensor::vector(data).unwrap(), 0, 1e-9).unwrap();
            let mean = s.data().iter().sum::<f64>() / n as f64;
            let std = (s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((std - 1.0).abs() < 1e-3);
        }

        #[test]
        fn pooling_constant_and_upsample_bounds(
            h in 1usize..7, w in 1usize..7, k in 1usize..5, c in -3.0f64..3.0,
            extra_h in 0usize..6, extra_w in 0usize..6, seed in any::<u32>(),
        ) {
            let p = avg_pool2d(&Tensor::full(&[h, w], c), k, 1).unwrap();
            prop_assert!(p.data().iter().all(|&v| (v - c).abs() < 1e-12));
            let data: Vec<f64> = (0..h * w)
                .map(|i| ((seed as u64 + i as u64 * 7919) % 1000) as f64 / 100.0 - 5.0)
                .collect();
            let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
            let up = bilinear_upsample(&Tensor::new(vec![h, w], data).unwrap(), (h + extra_h, w + extra_w)).unwrap();
            prop_assert!(up.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
