//! Kernels for the 3x3 / stride 1 / zero-pad 1 convolution.
//!
//! The convolution is lowered to im2col + gemm per sample. Every reduction
//! runs in a fixed order, so results are bit-identical across runs.

use super::Scalar;

#[inline]
pub(crate) fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    let mut tail = T::zero();
    for &x in rest {
        tail += x;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    #[inline]
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `[cin, h, w]` sample into `[cin * 9, h * w]` columns.
fn im2col<T: Scalar>(d: &ConvDims, x: &[T], cols: &mut [T]) {
    let (h, w, hw) = (d.h, d.w, d.hw());
    for ci in 0..d.cin {
        let src = &x[ci * hw..][..hw];
        for t in 0..9 {
            let (oy, ox) = (t / 3, t % 3);
            let dst = &mut cols[(ci * 9 + t) * hw..][..hw];
            for y in 0..h {
                let row = &mut dst[y * w..][..w];
                let sy = y + oy;
                if sy == 0 || sy > h {
                    row.fill(T::zero());
                    continue;
                }
                let srow = &src[(sy - 1) * w..][..w];
                match ox {
                    0 => {
                        row[0] = T::zero();
                        row[1..].copy_from_slice(&srow[..w - 1]);
                    }
                    1 => row.copy_from_slice(srow),
                    _ => {
                        row[..w - 1].copy_from_slice(&srow[1..]);
                        row[w - 1] = T::zero();
                    }
                }
            }
        }
    }
}

/// Adds `[cin * 9, h * w]` column gradients back onto a `[cin, h, w]` sample.
fn col2im_add<T: Scalar>(d: &ConvDims, cols: &[T], dx: &mut [T]) {
    let (h, w, hw) = (d.h, d.w, d.hw());
    for ci in 0..d.cin {
        let dst = &mut dx[ci * hw..][..hw];
        for t in 0..9 {
            let (oy, ox) = (t / 3, t % 3);
            let src = &cols[(ci * 9 + t) * hw..][..hw];
            for y in 0..h {
                let sy = y + oy;
                if sy == 0 || sy > h {
                    continue;
                }
                let row = &src[y * w..][..w];
                let drow = &mut dst[(sy - 1) * w..][..w];
                match ox {
                    0 => drow[..w - 1].iter_mut().zip(&row[1..]).for_each(|(a, &b)| *a += b),
                    1 => drow.iter_mut().zip(row).for_each(|(a, &b)| *a += b),
                    _ => drow[1..].iter_mut().zip(&row[..w - 1]).for_each(|(a, &b)| *a += b),
                }
            }
        }
    }
}

/// `C[m, n] = alpha * A[m, k] B[k, n] + beta * C` over slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[s, co] = bias[co] + sum_ci xcorr(x[s, ci], k[co, ci])`.
pub(crate) fn conv_forward<T: Scalar>(d: ConvDims, x: &[T], k: &[T], bias: &[T], out: &mut [T]) {
    let hw = d.hw();
    let kdim = d.cin * 9;
    let mut cols = vec![T::zero(); kdim * hw];
    for s in 0..d.n {
        im2col(&d, &x[s * d.cin * hw..][..d.cin * hw], &mut cols);
        let o = &mut out[s * d.cout * hw..][..d.cout * hw];
        for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        gemm((d.cout, kdim, hw), k, (kdim, 1), &cols, (hw, 1), T::one(), o);
    }
}

/// Accumulates gradients for input (if requested), kernel and bias.
pub(crate) fn conv_backward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    k: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dk: &mut [T],
    db: &mut [T],
) {
    let hw = d.hw();
    let kdim = d.cin * 9;

    for co in 0..d.cout {
        let mut acc = T::zero();
        for s in 0..d.n {
            acc += sum(&dy[(s * d.cout + co) * hw..][..hw]);
        }
        db[co] += acc;
    }

    let mut cols = vec![T::zero(); kdim * hw];
    let mut dcols = vec![T::zero(); if dx.is_some() { kdim * hw } else { 0 }];
    for s in 0..d.n {
        let g = &dy[s * d.cout * hw..][..d.cout * hw];
        im2col(&d, &x[s * d.cin * hw..][..d.cin * hw], &mut cols);
        // dK[cout, kdim] += dY[cout, hw] * cols^T
        gemm((d.cout, hw, kdim), g, (hw, 1), &cols, (1, hw), T::one(), dk);
        if let Some(dx) = dx.as_deref_mut() {
            // dcols[kdim, hw] = K^T * dY
            gemm((kdim, d.cout, hw), k, (1, kdim), g, (hw, 1), T::zero(), &mut dcols);
            col2im_add(&d, &dcols, &mut dx[s * d.cin * hw..][..d.cin * hw]);
        }
    }
}
