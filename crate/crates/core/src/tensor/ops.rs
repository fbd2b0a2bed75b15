//! Forward tensor operations. All functions are pure and validate extents.

use super::{strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// How the batch dimensions of a batched matmul line up.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// Element offset of each output batch's left and right matrices.
    pub a_offsets: Vec<usize>,
    pub b_offsets: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "matmul",
            format!("operands must have rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let rank = a_batch.len().max(b_batch.len());
    let pad = |batch: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - batch.len()];
        v.extend_from_slice(batch);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut out_batch = Vec::with_capacity(rank);
    for (&da, &db) in pa.iter().zip(&pb) {
        out_batch.push(match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("matmul", a, b)),
        });
    }
    let (sa, sb) = (strides_of(&pa), strides_of(&pb));
    let count: usize = out_batch.iter().product();
    let mut a_offsets = Vec::with_capacity(count);
    let mut b_offsets = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank {
            if pa[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        a_offsets.push(oa * m * k);
        b_offsets.push(ob * k * n);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = out_batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        a_offsets,
        b_offsets,
    })
}

/// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
///
/// Batch dimensions broadcast numpy-style; a rank-2 operand is shared across
/// every batch of the other.
pub fn matmul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![F::zero(); plan.out_shape.iter().product()];
    let (ki, ni) = (k as isize, n as isize);
    for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            (&a.data()[oa..oa + m * k], ki, 1),
            (&b.data()[ob..ob + k * n], ni, 1),
            F::zero(),
            (&mut out[i * m * n..(i + 1) * m * n], ni, 1),
        );
    }
    Ok(Tensor::from_parts(plan.out_shape, out))
}

fn zip_same<F: Element>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    ))
}

pub fn add<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn elementwise_mul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_same("elementwise_mul", a, b, |x, y| x * y)
}

/// Adds `bias[D]` to every last-axis slice of `x[.., D]`.
pub fn add_bias<F: Element>(x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let d = last_extent("add_bias", x)?;
    if bias.shape() != [d] {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let b = bias.data();
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % d])
            .collect(),
    ))
}

pub fn scale<F: Element>(x: &Tensor<F>, s: F) -> Tensor<F> {
    x.map(|v| v * s)
}

pub fn relu<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF written through `erf`.
pub fn gelu<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_scalar<F: Element>(v: F) -> F {
    let half = F::from_f64(0.5);
    half * v * (F::one() + (v * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn last_extent<F: Element>(op: &'static str, x: &Tensor<F>) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(Error::invalid(
            op,
            format!("needs a non-empty last axis, got shape {:?}", x.shape()),
        )),
    }
}

/// Softmax over the last axis, stabilised by subtracting the slice maximum.
pub fn softmax_lastaxis<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let d = last_extent("softmax", x)?;
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Per-slice mean and reciprocal standard deviation used by [`layernorm`].
pub(crate) fn layernorm_stats<F: Element>(row: &[F], eps: F) -> (F, F) {
    let d = F::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
    (mean, (var + eps).sqrt().recip())
}

/// Layer normalisation over the last axis with biased variance.
pub fn layernorm<F: Element>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let d = last_extent("layernorm", x)?;
    gamma.check_shape("layernorm", &[d])?;
    beta.check_shape("layernorm", &[d])?;
    if eps <= F::zero() {
        return Err(Error::InvalidArgument("layernorm eps must be > 0".into()));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let (mean, rstd) = layernorm_stats(row, eps);
        out.extend(
            row.iter()
                .enumerate()
                .map(|(i, &v)| (v - mean) * rstd * g[i] + b[i]),
        );
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn reshape<F: Element>(x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(Error::shape("reshape", x.shape(), shape));
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: x.data.clone(),
    })
}

/// Reorders axes so that output axis `i` is input axis `axes[i]`.
pub fn permute<F: Element>(x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes
            .iter()
            .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::invalid(
            "permute",
            format!(
                "{axes:?} is not a permutation of the axes of {:?}",
                x.shape()
            ),
        ));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Swaps the last two axes.
pub fn transpose<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::invalid(
            "transpose",
            format!("needs rank >= 2, got {:?}", x.shape()),
        ));
    }
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 2, rank - 1);
    permute(x, &axes)
}

/// Splits a shape around `axis` into (outer count, axis extent, inner count).
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat<F: Element>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no tensors given"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    for p in &parts[1..] {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Keeps indices `start..end` along `axis`.
pub fn slice<F: Element>(
    x: &Tensor<F>,
    axis: usize,
    start: usize,
    end: usize,
) -> Result<Tensor<F>> {
    if axis >= x.rank() || start > end || end > x.shape()[axis] {
        return Err(Error::invalid(
            "slice",
            format!(
                "range {start}..{end} on axis {axis} invalid for {:?}",
                x.shape()
            ),
        ));
    }
    let (outer, extent, inner) = split_at_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        let base = o * extent * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_left() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
    }

    #[test]
    fn matmul_row_times_column() {
        // 1*3 + 2*4
        let out = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(out, t(&[1, 1], &[11.0]));
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::<f64>::zeros([3, 2]);
        let b = Tensor::from_fn([2, 4], |i| i as f64 - 3.5);
        assert_eq!(matmul(&z, &b).unwrap(), Tensor::zeros([3, 4]));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_broadcasts_shared_rhs() {
        let a = Tensor::<f64>::from_fn([2, 2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn([3, 2], |i| (i as f64) * 0.5 - 1.0);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        let second = matmul(&slice(&a, 0, 1, 2).unwrap().reshaped(&[2, 3]), &b).unwrap();
        assert_eq!(&out.data()[4..], second.data());
    }

    #[test]
    fn matmul_incompatible_batch_fails() {
        let a = Tensor::<f64>::zeros([2, 2, 2]);
        let b = Tensor::<f64>::zeros([3, 2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetric_pair() {
        let out = softmax_lastaxis(&t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let out = softmax_lastaxis(&Tensor::<f32>::new([2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(out.all_finite());
        assert_eq!(out.data()[0], 1.0);
        assert!(out.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let out = softmax_lastaxis(&Tensor::<f32>::new([3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, &v) in out.data().iter().enumerate() {
            let expected = ((i + 1) as f64).exp() / z;
            assert!((v as f64 - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }

    #[test]
    fn softmax_rejects_empty_last_axis() {
        assert!(softmax_lastaxis(&Tensor::<f32>::zeros([2, 0])).is_err());
        assert!(softmax_lastaxis(&Tensor::<f32>::scalar(1.0)).is_err());
    }

    #[test]
    fn layernorm_constant_slice_is_zero() {
        let x = Tensor::<f32>::full([2, 4], 3.0);
        let out = layernorm(&x, &Tensor::full([4], 1.0), &Tensor::zeros([4]), 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_zero_gamma_yields_beta() {
        let x = Tensor::<f32>::from_fn([3, 4], |i| (i * i) as f32);
        let beta = Tensor::new([4], vec![1.0, -2.0, 0.5, 7.0]).unwrap();
        let out = layernorm(&x, &Tensor::zeros([4]), &beta, 1e-6).unwrap();
        for row in out.data().chunks(4) {
            assert_eq!(row, beta.data());
        }
    }

    #[test]
    fn layernorm_matches_direct_formula() {
        let vals = [0.3f32, -1.2, 2.5, 0.0, 4.1, -0.7];
        let x = Tensor::new([6], vals.to_vec()).unwrap();
        let out = layernorm(&x, &Tensor::full([6], 1.0), &Tensor::zeros([6]), 1e-6).unwrap();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / 6.0;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 6.0;
        for (&v, &o) in vals.iter().zip(out.data()) {
            let expected = (v as f64 - mean) / (var + 1e-6).sqrt();
            assert!((o as f64 - expected).abs() < 1e-5);
        }
        let m = out.data().iter().map(|&v| v as f64).sum::<f64>() / 6.0;
        let s = out
            .data()
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / 6.0;
        assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_and_relu_points() {
        let x = t(&[3], &[-3.0, 0.0, 3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(gelu(&x).data()[1], 0.0);
        // Phi(3) = 0.998650101968...
        assert!((gelu(&x).data()[2] - 3.0 * 0.998_650_101_968_369_9).abs() < 1e-12);
    }

    #[test]
    fn reshape_keeps_flat_order() {
        let x = Tensor::<f32>::from_fn([2, 3], |i| (i + 1) as f32);
        let y = reshape(&x, &[3, 2]).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(reshape(&x, &[4, 2]).is_err());
    }

    #[test]
    fn transpose_two_by_three() {
        let x = Tensor::<f32>::from_fn([2, 3], |i| i as f32);
        let y = transpose(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_rejects_duplicates() {
        let x = Tensor::<f32>::zeros([2, 3, 4]);
        assert!(permute(&x, &[0, 0, 1]).is_err());
        assert!(permute(&x, &[0, 1]).is_err());
        assert_eq!(permute(&x, &[2, 0, 1]).unwrap().shape(), &[4, 2, 3]);
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::<f32>::from_fn([2, 1, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn([2, 2, 3], |i| 100.0 + i as f32);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(slice(&c, 1, 0, 1).unwrap(), a);
        assert_eq!(slice(&c, 1, 1, 3).unwrap(), b);
        assert!(concat(&[&a, &Tensor::zeros([3, 1, 3])], 1).is_err());
        assert!(slice(&c, 1, 2, 4).is_err());
    }

    #[test]
    fn add_bias_broadcasts_last_axis() {
        let x = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            add_bias(&x, &b).unwrap().data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
        assert!(add_bias(&x, &Tensor::zeros([2])).is_err());
    }

    impl Tensor<f64> {
        fn reshaped(&self, shape: &[usize]) -> Self {
            reshape(self, shape).unwrap()
        }
    }
}
