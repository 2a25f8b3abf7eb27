//! Same-size 2-D cross-correlation with zero padding, stride 1.
//!
//! Each kernel offset contributes one `c_out × c_in` by `c_in × hw` matrix
//! product against a shifted copy of the input, so scratch memory is a
//! single input-sized buffer regardless of kernel size.

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// `C = alpha * A * B + beta * C` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Every strided access must stay inside the slices handed in.
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Copy `input` shifted by `(dy, dx)` into `out`, zero-filling pixels whose
/// source lies outside the image.
fn shift_into(input: &[f64], d: &ConvDims, dy: isize, dx: isize, out: &mut [f64]) {
    let (h, w) = (d.h as isize, d.w as isize);
    for c in 0..d.c_in {
        let plane = &input[c * d.h * d.w..(c + 1) * d.h * d.w];
        let dst = &mut out[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..h {
            let row = &mut dst[(i * w) as usize..((i + 1) * w) as usize];
            let si = i + dy;
            if si < 0 || si >= h {
                row.fill(0.0);
                continue;
            }
            let src = &plane[(si * w) as usize..((si + 1) * w) as usize];
            let j0 = (-dx).max(0);
            let j1 = (w - dx).min(w);
            row[..j0.max(0).min(w) as usize].fill(0.0);
            if j1 > j0 {
                row[j0 as usize..j1 as usize]
                    .copy_from_slice(&src[(j0 + dx) as usize..(j1 + dx) as usize]);
            }
            if j1 < w {
                row[j1.max(0) as usize..].fill(0.0);
            }
        }
    }
}

/// Add `src` shifted back by `(dy, dx)` into `acc`; adjoint of [`shift_into`].
fn unshift_add(src: &[f64], d: &ConvDims, dy: isize, dx: isize, acc: &mut [f64]) {
    let (h, w) = (d.h as isize, d.w as isize);
    for c in 0..d.c_in {
        let s = &src[c * d.h * d.w..(c + 1) * d.h * d.w];
        let a = &mut acc[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..h {
            let si = i + dy;
            if si < 0 || si >= h {
                continue;
            }
            let j0 = (-dx).max(0);
            let j1 = (w - dx).min(w);
            for j in j0..j1 {
                a[(si * w + j + dx) as usize] += s[(i * w + j) as usize];
            }
        }
    }
}

pub(crate) fn forward(
    input: &[f64],
    kernels: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
) -> Vec<f64> {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let r = (d.k / 2) as isize;
    let mut out = vec![0.0; d.c_out * hw];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.fill(b[o]);
        }
    }
    let mut shifted = vec![0.0; d.c_in * hw];
    for di in 0..d.k {
        for dj in 0..d.k {
            let (dy, dx) = (di as isize - r, dj as isize - r);
            shift_into(input, d, dy, dx, &mut shifted);
            gemm(
                d.c_out,
                d.c_in,
                hw,
                &kernels[di * d.k + dj..],
                d.c_in * kk,
                kk,
                &shifted,
                hw,
                1,
                1.0,
                &mut out,
                hw,
                1,
            );
        }
    }
    out
}

/// Returns `(d_input, d_kernels)`; either is skipped when not requested.
pub(crate) fn backward(
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    need_input: bool,
    need_kernels: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let r = (d.k / 2) as isize;
    let mut d_input = need_input.then(|| vec![0.0; d.c_in * hw]);
    let mut d_kernels = need_kernels.then(|| vec![0.0; d.c_out * d.c_in * kk]);
    let mut scratch = vec![0.0; d.c_in * hw];
    for di in 0..d.k {
        for dj in 0..d.k {
            let (dy, dx) = (di as isize - r, dj as isize - r);
            let off = di * d.k + dj;
            if let Some(dk) = d_kernels.as_mut() {
                shift_into(input, d, dy, dx, &mut scratch);
                gemm(
                    d.c_out,
                    hw,
                    d.c_in,
                    grad_out,
                    hw,
                    1,
                    &scratch,
                    1,
                    hw,
                    0.0,
                    &mut dk[off..],
                    d.c_in * kk,
                    kk,
                );
            }
            if let Some(dx_acc) = d_input.as_mut() {
                gemm(
                    d.c_in,
                    d.c_out,
                    hw,
                    &kernels[off..],
                    kk,
                    d.c_in * kk,
                    grad_out,
                    hw,
                    1,
                    0.0,
                    &mut scratch,
                    hw,
                    1,
                );
                unshift_add(&scratch, d, dy, dx, dx_acc);
            }
        }
    }
    (d_input, d_kernels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_and_unshift_are_adjoint() {
        let d = ConvDims {
            c_in: 2,
            c_out: 1,
            h: 3,
            w: 4,
            k: 3,
        };
        let a: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..24).map(|i| (i as f64 * 0.91).cos()).collect();
        for (dy, dx) in [(-1, -1), (0, 1), (1, 0), (2, -2)] {
            let mut sa = vec![0.0; 24];
            shift_into(&a, &d, dy, dx, &mut sa);
            let lhs: f64 = sa.iter().zip(&b).map(|(x, y)| x * y).sum();
            let mut ub = vec![0.0; 24];
            unshift_add(&b, &d, dy, dx, &mut ub);
            let rhs: f64 = a.iter().zip(&ub).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
