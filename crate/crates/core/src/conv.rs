//! 3×3, stride 1, zero-pad 1 convolution kernels on raw NCHW buffers.
//!
//! Forward lowers each batch item to a tiled im2col matrix and multiplies it
//! by the `(Cout, Cin·9)` weight matrix. The input gradient is the same
//! convolution applied to the output gradient with the kernel rotated by 180°
//! and its channel axes swapped, so it reuses the forward path.

use rayon::prelude::*;

use crate::tensor::Shape;

/// Bound on the im2col tile, in `f64` values (4 MiB).
const TILE_BUDGET: usize = 1 << 19;

fn tile_len(cin: usize, hw: usize) -> usize {
    (TILE_BUDGET / (cin * 9)).clamp(1, hw)
}

/// Writes the im2col block for output pixels `[p0, p0 + len)` of one image.
/// Row `(ci·3 + ky)·3 + kx` holds the input pixel under kernel tap `(ky, kx)`.
fn im2col_tile(x: &[f64], cin: usize, h: usize, w: usize, p0: usize, len: usize, cols: &mut [f64]) {
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * len..][..len];
                for (j, dst) in row.iter_mut().enumerate() {
                    let p = p0 + j;
                    let (oy, ox) = (p / w, p % w);
                    let iy = oy + ky;
                    let ix = ox + kx;
                    *dst = if iy >= 1 && iy <= h && ix >= 1 && ix <= w {
                        plane[(iy - 1) * w + (ix - 1)]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// `C (m×n) = alpha·A (m×k)·B (k×n) + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last =
        |rs: isize, cs: isize, r: usize, q: usize| (r as isize - 1) * rs + (q as isize - 1) * cs;
    assert!(last(rsa, csa, m, k) < a.len() as isize || k == 0);
    assert!(last(rsb, csb, k, n) < b.len() as isize || k == 0);
    assert!(last(rsc, csc, m, n) < c.len() as isize);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Forward convolution. `weight` is `(cout, cin, 3, 3)` row-major.
pub(crate) fn forward(
    x: &[f64],
    xs: Shape,
    weight: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let [n, cin, h, w] = xs;
    let hw = h * w;
    let kdim = cin * 9;
    let tile = tile_len(cin, hw);
    let mut out = vec![0.0; n * cout * hw];
    if hw == 0 || cout == 0 {
        return out;
    }
    out.par_chunks_mut(cout * hw)
        .zip(x.par_chunks(cin * hw))
        .for_each(|(y, img)| {
            let mut cols = vec![0.0; kdim * tile];
            let mut p0 = 0;
            while p0 < hw {
                let len = tile.min(hw - p0);
                im2col_tile(img, cin, h, w, p0, len, &mut cols);
                gemm(
                    cout,
                    kdim,
                    len,
                    weight,
                    kdim as isize,
                    1,
                    &cols,
                    len as isize,
                    1,
                    0.0,
                    &mut y[p0..],
                    hw as isize,
                    1,
                );
                p0 += len;
            }
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

/// Kernel for the input gradient: `rot[ci, co, ky, kx] = w[co, ci, 2-ky, 2-kx]`.
fn rotate_kernel(weight: &[f64], cout: usize, cin: usize) -> Vec<f64> {
    let mut rot = vec![0.0; weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    rot[((ci * cout + co) * 3 + ky) * 3 + kx] =
                        weight[((co * cin + ci) * 3 + (2 - ky)) * 3 + (2 - kx)];
                }
            }
        }
    }
    rot
}

pub(crate) fn grad_input(grad_out: &[f64], xs: Shape, weight: &[f64], cout: usize) -> Vec<f64> {
    let [n, cin, h, w] = xs;
    let rot = rotate_kernel(weight, cout, cin);
    forward(grad_out, [n, cout, h, w], &rot, cin, None)
}

pub(crate) fn grad_weight(grad_out: &[f64], x: &[f64], xs: Shape, cout: usize) -> Vec<f64> {
    let [_, cin, h, w] = xs;
    let hw = h * w;
    let kdim = cin * 9;
    let tile = tile_len(cin, hw);
    let partials: Vec<Vec<f64>> = grad_out
        .par_chunks(cout * hw)
        .zip(x.par_chunks(cin * hw))
        .map(|(gy, img)| {
            let mut dw = vec![0.0; cout * kdim];
            let mut cols = vec![0.0; kdim * tile];
            let mut p0 = 0;
            while p0 < hw {
                let len = tile.min(hw - p0);
                im2col_tile(img, cin, h, w, p0, len, &mut cols);
                // dW (cout×kdim) += dY[:, tile] (cout×len) · colsᵀ (len×kdim)
                gemm(
                    cout,
                    len,
                    kdim,
                    &gy[p0..],
                    hw as isize,
                    1,
                    &cols,
                    1,
                    len as isize,
                    1.0,
                    &mut dw,
                    kdim as isize,
                    1,
                );
                p0 += len;
            }
            dw
        })
        .collect();
    sum_in_order(partials, cout * kdim)
}

pub(crate) fn grad_bias(grad_out: &[f64], n: usize, cout: usize, hw: usize) -> Vec<f64> {
    let mut db = vec![0.0; cout];
    for b in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            let start = (b * cout + co) * hw;
            *acc += grad_out[start..start + hw].iter().sum::<f64>();
        }
    }
    db
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_else(|| vec![0.0; len]);
    for p in iter {
        acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    acc
}
