//! Real-valued convolution used for training: im2col lowering plus GEMM.

use crate::bitconv::ConvGeom;
use crate::error::Result;
use crate::tensor::Tensor;

fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [f64]) {
    let positions = oh * ow;
    for ch in 0..c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            0.0
                        } else {
                            x[(ch * h + iy as usize) * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [f64]) {
    let positions = oh * ow;
    for ch in 0..c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(ch * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, all row-major unless transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given strides.
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
            n as isize,
            1,
        );
    }
}

/// Convolution forward; `cols` keeps the lowered input for the backward pass.
pub(crate) fn conv_forward(x: &Tensor, weights: &Tensor, g: &ConvGeom) -> Result<(Tensor, Vec<f64>)> {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = g.out_hw(h, w)?;
    let taps = g.n_taps();
    let positions = oh * ow;
    let mut out = Tensor::zeros([n, g.out_ch, oh, ow]);
    let mut cols = vec![0.0; n * taps * positions];
    for b in 0..n {
        let col = &mut cols[b * taps * positions..(b + 1) * taps * positions];
        im2col(&x.data[b * c * h * w..(b + 1) * c * h * w], c, h, w, g, oh, ow, col);
        let dst = &mut out.data[b * g.out_ch * positions..(b + 1) * g.out_ch * positions];
        gemm(g.out_ch, taps, positions, &weights.data, false, col, false, 0.0, dst);
    }
    Ok((out, cols))
}

/// Returns `(d input, d weights)`; `d input` is skipped when not needed.
pub(crate) fn conv_backward(
    dy: &Tensor,
    cols: &[f64],
    weights: &Tensor,
    x_shape: [usize; 4],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor>, Tensor) {
    let [n, c, h, w] = x_shape;
    let [_, _, oh, ow] = dy.shape;
    let taps = g.n_taps();
    let positions = oh * ow;
    let mut dw = Tensor::zeros(weights.shape);
    let mut dx = need_dx.then(|| Tensor::zeros(x_shape));
    let mut dcols = vec![0.0; taps * positions];
    for b in 0..n {
        let dyb = &dy.data[b * g.out_ch * positions..(b + 1) * g.out_ch * positions];
        let col = &cols[b * taps * positions..(b + 1) * taps * positions];
        gemm(g.out_ch, positions, taps, dyb, false, col, true, 1.0, &mut dw.data);
        if let Some(dx) = dx.as_mut() {
            gemm(taps, g.out_ch, positions, &weights.data, true, dyb, false, 0.0, &mut dcols);
            col2im(&dcols, c, h, w, g, oh, ow, &mut dx.data[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    (dx, dw)
}
