//! 3×3, stride-1, same-padded convolution in NHWC layout.
//!
//! The convolution is lowered to a matrix product: each output pixel gets one
//! row of `9·Cin` input taps ordered `(ky, kx, cin)`, which lines up with a
//! `[3, 3, Cin, Cout]` weight viewed as a `[9·Cin, Cout]` matrix.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const KERNEL: usize = 3;
const PAD: isize = 1;
/// Rows of the lowered matrix processed per GEMM call.
const ROWS_PER_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        KERNEL * KERNEL * self.cin
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn samples_per_chunk(&self) -> usize {
        (ROWS_PER_CHUNK / self.pixels()).max(1)
    }
}

fn geometry<E: Element>(x: &Tensor<E>, weight: &Tensor<E>) -> Result<Geometry> {
    let (height, width, cin) = match x.shape() {
        [_, h, w, c] => (*h, *w, *c),
        _ => return Err(Error::mismatch("conv2d input (expected NHWC)", x.shape(), weight.shape())),
    };
    let cout = match weight.shape() {
        [KERNEL, KERNEL, wc, co] if *wc == cin => *co,
        _ => return Err(Error::mismatch("conv2d channels", x.shape(), weight.shape())),
    };
    Ok(Geometry {
        height,
        width,
        cin,
        cout,
    })
}

/// Lower `samples` consecutive images starting at `x` into `cols`.
fn im2col<E: Element>(x: &[E], g: Geometry, cols: &mut [E]) {
    let taps = g.taps();
    let samples = x.len() / (g.pixels() * g.cin);
    cols.fill(E::zero());
    for s in 0..samples {
        let image = &x[s * g.pixels() * g.cin..(s + 1) * g.pixels() * g.cin];
        for i in 0..g.height {
            for j in 0..g.width {
                let row = &mut cols[((s * g.height + i) * g.width + j) * taps..][..taps];
                for ky in 0..KERNEL {
                    let ii = i as isize + ky as isize - PAD;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let jj = j as isize + kx as isize - PAD;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        let src = (ii as usize * g.width + jj as usize) * g.cin;
                        let dst = (ky * KERNEL + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&image[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

/// Scatter-add lowered gradients back onto image positions.
fn col2im<E: Element>(cols: &[E], g: Geometry, grad_x: &mut [E]) {
    let taps = g.taps();
    let samples = grad_x.len() / (g.pixels() * g.cin);
    for s in 0..samples {
        let image = &mut grad_x[s * g.pixels() * g.cin..(s + 1) * g.pixels() * g.cin];
        for i in 0..g.height {
            for j in 0..g.width {
                let row = &cols[((s * g.height + i) * g.width + j) * taps..][..taps];
                for ky in 0..KERNEL {
                    let ii = i as isize + ky as isize - PAD;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let jj = j as isize + kx as isize - PAD;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        let dst = (ii as usize * g.width + jj as usize) * g.cin;
                        let src = (ky * KERNEL + kx) * g.cin;
                        for (d, &v) in image[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `[N, H, W, Cin] → [N, H, W, Cout]`.
pub fn conv2d<E: Element>(x: &Tensor<E>, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let g = geometry(x, weight)?;
    if bias.shape() != [g.cout] {
        return Err(Error::mismatch("conv2d bias", weight.shape(), bias.shape()));
    }
    let n = x.shape()[0];
    let spc = g.samples_per_chunk();
    let in_chunk = spc * g.pixels() * g.cin;
    let out_chunk = spc * g.pixels() * g.cout;
    let mut out = vec![E::zero(); n * g.pixels() * g.cout];

    out.par_chunks_mut(out_chunk)
        .zip(x.data().par_chunks(in_chunk))
        .for_each(|(out, x)| {
            let rows = out.len() / g.cout;
            let mut cols = vec![E::zero(); rows * g.taps()];
            im2col(x, g, &mut cols);
            for px in out.chunks_mut(g.cout) {
                px.copy_from_slice(bias.data());
            }
            E::gemm(
                rows,
                g.taps(),
                g.cout,
                E::one(),
                &cols,
                (g.taps() as isize, 1),
                weight.data(),
                (g.cout as isize, 1),
                E::one(),
                out,
                (g.cout as isize, 1),
            );
        });

    Tensor::new(vec![n, g.height, g.width, g.cout], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<E: Element> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<E>>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Gradients of [`conv2d`] given the forward input and the output gradient.
pub fn conv2d_backward<E: Element>(
    grad_out: &Tensor<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    need_input_grad: bool,
) -> Result<ConvGrads<E>> {
    let g = geometry(input, weight)?;
    let expected = [input.shape()[0], g.height, g.width, g.cout];
    if grad_out.shape() != expected {
        return Err(Error::mismatch("conv2d backward", &expected, grad_out.shape()));
    }

    let spc = g.samples_per_chunk();
    let in_chunk = spc * g.pixels() * g.cin;
    let out_chunk = spc * g.pixels() * g.cout;
    let mut grad_w = vec![E::zero(); g.taps() * g.cout];
    let mut grad_b = vec![E::zero(); g.cout];
    let mut grad_x = if need_input_grad {
        Some(vec![E::zero(); input.len()])
    } else {
        None
    };

    for (chunk, (x, gy)) in input
        .data()
        .chunks(in_chunk)
        .zip(grad_out.data().chunks(out_chunk))
        .enumerate()
    {
        let rows = gy.len() / g.cout;
        let mut cols = vec![E::zero(); rows * g.taps()];
        im2col(x, g, &mut cols);

        for px in gy.chunks(g.cout) {
            for (b, &v) in grad_b.iter_mut().zip(px) {
                *b = *b + v;
            }
        }
        // grad_w += colsᵀ · gy
        E::gemm(
            g.taps(),
            rows,
            g.cout,
            E::one(),
            &cols,
            (1, g.taps() as isize),
            gy,
            (g.cout as isize, 1),
            E::one(),
            &mut grad_w,
            (g.cout as isize, 1),
        );

        if let Some(grad_x) = grad_x.as_mut() {
            // grad_cols = gy · Wᵀ
            E::gemm(
                rows,
                g.cout,
                g.taps(),
                E::one(),
                gy,
                (g.cout as isize, 1),
                weight.data(),
                (1, g.cout as isize),
                E::zero(),
                &mut cols,
                (g.taps() as isize, 1),
            );
            let start = chunk * in_chunk;
            col2im(&cols, g, &mut grad_x[start..start + x.len()]);
        }
    }

    Ok(ConvGrads {
        input: grad_x
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), grad_w)?,
        bias: Tensor::new(vec![g.cout], grad_b)?,
    })
}
