//! Vector-Jacobian products for every forward op in [`super::ops`].
//!
//! Each function takes the op's inputs (or whatever the op saved) plus the
//! upstream gradient, which must have the op's output shape, and returns the
//! gradient with respect to each input.

use super::ops::{self, layernorm_stats, matmul_plan, split_at_axis};
use super::{Element, Tensor};
use crate::error::{Error, Result};

fn check_upstream<F: Element>(
    op: &'static str,
    upstream: &Tensor<F>,
    expected: &[usize],
) -> Result<()> {
    if upstream.shape() != expected {
        return Err(Error::shape(op, upstream.shape(), expected));
    }
    Ok(())
}

/// Gradient of `matmul(a, b)` with respect to `a`: `upstream * b^T`, summed
/// over any batch dimensions `a` was broadcast along.
pub fn vjp_matmul_lhs<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<Tensor<F>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    check_upstream("vjp_matmul", upstream, &plan.out_shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut grad = vec![F::zero(); a.numel()];
    for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        F::gemm(
            m,
            n,
            k,
            F::one(),
            (&upstream.data()[i * m * n..(i + 1) * m * n], n as isize, 1),
            (&b.data()[ob..ob + k * n], 1, n as isize),
            F::one(),
            (&mut grad[oa..oa + m * k], k as isize, 1),
        );
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), grad))
}

/// Gradient of `matmul(a, b)` with respect to `b`: `a^T * upstream`.
pub fn vjp_matmul_rhs<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<Tensor<F>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    check_upstream("vjp_matmul", upstream, &plan.out_shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut grad = vec![F::zero(); b.numel()];
    for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        F::gemm(
            k,
            m,
            n,
            F::one(),
            (&a.data()[oa..oa + m * k], 1, k as isize),
            (&upstream.data()[i * m * n..(i + 1) * m * n], n as isize, 1),
            F::one(),
            (&mut grad[ob..ob + k * n], n as isize, 1),
        );
    }
    Ok(Tensor::from_parts(b.shape().to_vec(), grad))
}

pub fn vjp_matmul<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    Ok((
        vjp_matmul_lhs(a, b, upstream)?,
        vjp_matmul_rhs(a, b, upstream)?,
    ))
}

pub fn vjp_add<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("vjp_add", a.shape(), b.shape()));
    }
    check_upstream("vjp_add", upstream, a.shape())?;
    Ok((upstream.clone(), upstream.clone()))
}

pub fn vjp_elementwise_mul<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("vjp_elementwise_mul", a.shape(), b.shape()));
    }
    check_upstream("vjp_elementwise_mul", upstream, a.shape())?;
    Ok((
        ops::elementwise_mul(upstream, b)?,
        ops::elementwise_mul(upstream, a)?,
    ))
}

/// Returns (gradient of `x`, gradient of `bias`).
pub fn vjp_add_bias<F: Element>(
    x: &Tensor<F>,
    bias: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    check_upstream("vjp_add_bias", upstream, x.shape())?;
    let d = bias.numel();
    if x.shape().last() != Some(&d) {
        return Err(Error::shape("vjp_add_bias", x.shape(), bias.shape()));
    }
    let mut gb = vec![F::zero(); d];
    for row in upstream.data().chunks(d) {
        for (g, &u) in gb.iter_mut().zip(row) {
            *g = *g + u;
        }
    }
    Ok((upstream.clone(), Tensor::from_parts(vec![d], gb)))
}

pub fn vjp_scale<F: Element>(s: F, upstream: &Tensor<F>) -> Tensor<F> {
    ops::scale(upstream, s)
}

pub fn vjp_relu<F: Element>(x: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    check_upstream("vjp_relu", upstream, x.shape())?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(upstream.data())
            .map(|(&v, &u)| if v > F::zero() { u } else { F::zero() })
            .collect(),
    ))
}

pub fn vjp_gelu<F: Element>(x: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    check_upstream("vjp_gelu", upstream, x.shape())?;
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi =
        F::from_f64(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    let half = F::from_f64(0.5);
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(upstream.data())
            .map(|(&v, &u)| {
                let cdf = half * (F::one() + (v * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                u * (cdf + v * pdf)
            })
            .collect(),
    ))
}

/// Takes the softmax *output* `y`: `dx = y * (u - <u, y>)` per slice.
pub fn vjp_softmax<F: Element>(y: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    check_upstream("vjp_softmax", upstream, y.shape())?;
    let d = *y
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("vjp_softmax", "scalar input"))?;
    let mut out = Vec::with_capacity(y.numel());
    for (yr, ur) in y.data().chunks(d).zip(upstream.data().chunks(d)) {
        let dot: F = yr.iter().zip(ur).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(ur).map(|(&a, &b)| a * (b - dot)));
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

/// Returns (gradient of `x`, of `gamma`, of `beta`).
pub fn vjp_layernorm<F: Element>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    eps: F,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    check_upstream("vjp_layernorm", upstream, x.shape())?;
    let d = gamma.numel();
    if x.shape().last() != Some(&d) {
        return Err(Error::shape("vjp_layernorm", x.shape(), gamma.shape()));
    }
    let g = gamma.data();
    let df = F::from_f64(d as f64);
    let mut gx = Vec::with_capacity(x.numel());
    let mut ggamma = vec![F::zero(); d];
    let mut gbeta = vec![F::zero(); d];
    let mut xhat = vec![F::zero(); d];
    let mut gxhat = vec![F::zero(); d];
    for (xr, ur) in x.data().chunks(d).zip(upstream.data().chunks(d)) {
        let (mean, rstd) = layernorm_stats(xr, eps);
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            gxhat[i] = ur[i] * g[i];
            ggamma[i] = ggamma[i] + ur[i] * xhat[i];
            gbeta[i] = gbeta[i] + ur[i];
        }
        let mean_g = gxhat.iter().copied().sum::<F>() / df;
        let mean_gx = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / df;
        gx.extend((0..d).map(|i| rstd * (gxhat[i] - mean_g - xhat[i] * mean_gx)));
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![d], ggamma),
        Tensor::from_parts(vec![d], gbeta),
    ))
}

pub fn vjp_reshape<F: Element>(input_shape: &[usize], upstream: &Tensor<F>) -> Result<Tensor<F>> {
    ops::reshape(upstream, input_shape)
}

/// Gradient of `permute(x, axes)` is the inverse permutation of the upstream.
pub fn vjp_permute<F: Element>(axes: &[usize], upstream: &Tensor<F>) -> Result<Tensor<F>> {
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        if a >= axes.len() {
            return Err(Error::invalid("vjp_permute", format!("bad axes {axes:?}")));
        }
        inverse[a] = i;
    }
    ops::permute(upstream, &inverse)
}

pub fn vjp_transpose<F: Element>(upstream: &Tensor<F>) -> Result<Tensor<F>> {
    ops::transpose(upstream)
}

/// Splits the upstream gradient back into pieces with the given shapes.
pub fn vjp_concat<F: Element>(
    shapes: &[Vec<usize>],
    axis: usize,
    upstream: &Tensor<F>,
) -> Result<Vec<Tensor<F>>> {
    let mut start = 0;
    let mut grads = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let extent = *shape
            .get(axis)
            .ok_or_else(|| Error::invalid("vjp_concat", format!("axis {axis} out of range")))?;
        let g = ops::slice(upstream, axis, start, start + extent)?;
        if g.shape() != shape.as_slice() {
            return Err(Error::shape("vjp_concat", g.shape(), shape));
        }
        grads.push(g);
        start += extent;
    }
    if upstream.shape().get(axis) != Some(&start) {
        return Err(Error::shape("vjp_concat", upstream.shape(), &[start]));
    }
    Ok(grads)
}

/// Scatters the upstream gradient into zeros of the input shape.
pub fn vjp_slice<F: Element>(
    input_shape: &[usize],
    axis: usize,
    start: usize,
    upstream: &Tensor<F>,
) -> Result<Tensor<F>> {
    if axis >= input_shape.len() {
        return Err(Error::invalid(
            "vjp_slice",
            format!("axis {axis} out of range"),
        ));
    }
    let mut expected = input_shape.to_vec();
    let len = upstream.shape().get(axis).copied().unwrap_or(0);
    if start + len > input_shape[axis] {
        return Err(Error::shape("vjp_slice", input_shape, upstream.shape()));
    }
    expected[axis] = len;
    check_upstream("vjp_slice", upstream, &expected)?;
    let (outer, extent, inner) = split_at_axis(input_shape, axis);
    let mut grad = vec![F::zero(); input_shape.iter().product()];
    for o in 0..outer {
        let dst = o * extent * inner + start * inner;
        let src = o * len * inner;
        grad[dst..dst + len * inner].copy_from_slice(&upstream.data()[src..src + len * inner]);
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_passes_upstream_to_both() {
        let a = Tensor::<f64>::zeros([2, 2]);
        let u = Tensor::from_fn([2, 2], |i| i as f64);
        let (ga, gb) = vjp_add(&a, &a, &u).unwrap();
        assert_eq!(ga, u);
        assert_eq!(gb, u);
    }

    #[test]
    fn matmul_identity_left_passes_upstream_to_rhs() {
        let id = Tensor::<f64>::eye(3);
        let b = Tensor::from_fn([3, 2], |i| i as f64);
        let u = Tensor::from_fn([3, 2], |i| 1.0 - i as f64);
        assert_eq!(vjp_matmul_rhs(&id, &b, &u).unwrap(), u);
    }

    #[test]
    fn upstream_shape_is_checked() {
        let x = Tensor::<f64>::zeros([2, 3]);
        assert!(vjp_relu(&x, &Tensor::zeros([3, 2])).is_err());
        assert!(vjp_matmul(&x, &Tensor::zeros([3, 4]), &Tensor::zeros([2, 3])).is_err());
        assert!(vjp_softmax(&x, &Tensor::zeros([6])).is_err());
    }

    #[test]
    fn broadcast_lhs_gradient_sums_over_batches() {
        // b is shared across two batches of a; its gradient accumulates both.
        let a = Tensor::<f64>::full([2, 1, 1], 1.0);
        let b = Tensor::<f64>::full([1, 1], 5.0);
        let u = Tensor::<f64>::new([2, 1, 1], vec![2.0, 3.0]).unwrap();
        let (ga, gb) = vjp_matmul(&a, &b, &u).unwrap();
        assert_eq!(ga.data(), &[10.0, 15.0]);
        assert_eq!(gb.data(), &[5.0]);
    }
}
