use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `x · W + b` for `x: [N, D]`, `W: [D, U]`, `b: [U]`.
pub fn dense<E: Element>(x: &Tensor<E>, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, d, u) = match (x.shape(), weight.shape()) {
        ([n, d], [d2, u]) if d == d2 => (*n, *d, *u),
        _ => return Err(Error::mismatch("dense", x.shape(), weight.shape())),
    };
    if bias.shape() != [u] {
        return Err(Error::mismatch("dense bias", weight.shape(), bias.shape()));
    }
    let mut out = Vec::with_capacity(n * u);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    E::gemm(
        n,
        d,
        u,
        E::one(),
        x.data(),
        (d as isize, 1),
        weight.data(),
        (u as isize, 1),
        E::one(),
        &mut out,
        (u as isize, 1),
    );
    Tensor::new(vec![n, u], out)
}

/// Returns `(grad_x, grad_w, grad_b)`; `grad_x` only when requested.
pub fn dense_backward<E: Element>(
    grad_out: &Tensor<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<E>>, Tensor<E>, Tensor<E>)> {
    let (n, d, u) = match (input.shape(), weight.shape()) {
        ([n, d], [_, u]) => (*n, *d, *u),
        _ => return Err(Error::mismatch("dense backward", input.shape(), weight.shape())),
    };
    if grad_out.shape() != [n, u] {
        return Err(Error::mismatch("dense backward", &[n, u], grad_out.shape()));
    }
    let mut grad_w = vec![E::zero(); d * u];
    E::gemm(
        d,
        n,
        u,
        E::one(),
        input.data(),
        (1, d as isize),
        grad_out.data(),
        (u as isize, 1),
        E::zero(),
        &mut grad_w,
        (u as isize, 1),
    );
    let mut grad_b = vec![E::zero(); u];
    for row in grad_out.data().chunks(u) {
        for (b, &g) in grad_b.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    let grad_x = if need_input_grad {
        let mut gx = vec![E::zero(); n * d];
        E::gemm(
            n,
            u,
            d,
            E::one(),
            grad_out.data(),
            (u as isize, 1),
            weight.data(),
            (1, u as isize),
            E::zero(),
            &mut gx,
            (d as isize, 1),
        );
        Some(Tensor::new(vec![n, d], gx)?)
    } else {
        None
    };
    Ok((
        grad_x,
        Tensor::new(vec![d, u], grad_w)?,
        Tensor::new(vec![u], grad_b)?,
    ))
}
