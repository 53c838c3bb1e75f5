//! im2col-based 2D convolution on `[C, H, W]` arrays, forward and backward.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayView4};

/// Output spatial size for one axis.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold `x` into a `[C*k*k, oh*ow]` matrix of receptive-field columns.
pub fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut out_row = cols.row_mut(row);
                let out = out_row.as_slice_mut().expect("cols row contiguous");
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[base + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[C*k*k, oh*ow]` column matrix back onto a `[C, H, W]` image,
/// accumulating overlaps (the adjoint of [`im2col`]).
pub fn col2im(
    cols: &ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let col_row = cols.row(row);
                let src = col_row.as_slice().expect("cols row contiguous");
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += src[base + ox];
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward pass. Returns `(output [Cout, oh, ow], cols)` so the
/// caller can stash `cols` for the backward pass.
pub fn conv2d_forward(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (cout, cin, k, _) = w.dim();
    let (c, h, win) = x.dim();
    assert_eq!(c, cin, "conv input channels {c} != weight channels {cin}");
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(win, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let w2 = w
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut y2 = w2.dot(&cols);
    if let Some(b) = b {
        for (mut row, &bias) in y2.rows_mut().into_iter().zip(b.iter()) {
            row += bias;
        }
    }
    let y = y2.into_shape_with_order((cout, oh, ow)).expect("output reshape");
    (y, cols)
}

/// Gradients of the convolution given upstream `dy`.
pub struct ConvGrads {
    pub dx: Array3<f64>,
    pub dw: ndarray::Array4<f64>,
    pub db: Array1<f64>,
}

pub fn conv2d_backward(
    dy: &ArrayView3<f64>,
    x_dim: (usize, usize, usize),
    w: &ArrayView4<f64>,
    cols: &ArrayView2<f64>,
    stride: usize,
    pad: usize,
) -> ConvGrads {
    let (cout, cin, k, _) = w.dim();
    let (c, h, win) = x_dim;
    let (_, oh, ow) = dy.dim();
    let dy2 = dy
        .to_shape((cout, oh * ow))
        .expect("dy reshape")
        .to_owned();
    let db = dy2.sum_axis(ndarray::Axis(1));
    let dw2 = dy2.dot(&cols.t());
    let dw = dw2
        .into_shape_with_order((cout, cin, k, k))
        .expect("dw reshape");
    let w2 = w
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let dcols = w2.t().dot(&dy2);
    let dx = col2im(&dcols.view(), c, h, win, k, stride, pad);
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Array3::from_shape_fn((2, 4, 4), |(c, y, xx)| (c * 16 + y * 4 + xx) as f64);
        // 1x1 kernel selecting channel c -> c.
        let mut w = Array4::zeros((2, 2, 1, 1));
        w[[0, 0, 0, 0]] = 1.0;
        w[[1, 1, 0, 0]] = 1.0;
        let (y, _) = conv2d_forward(&x.view(), &w.view(), None, 1, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn known_3x3_sum_kernel() {
        let x = Array3::from_elem((1, 3, 3), 1.0);
        let w = Array4::from_elem((1, 1, 3, 3), 1.0);
        let (y, _) = conv2d_forward(&x.view(), &w.view(), None, 1, 1);
        // Center cell sees all 9 ones; corners see 4.
        assert_eq!(y[[0, 1, 1]], 9.0);
        assert_eq!(y[[0, 0, 0]], 4.0);
        assert_eq!(y.dim(), (1, 3, 3));
    }

    #[test]
    fn stride_two_halves_resolution() {
        let x = Array3::from_elem((3, 8, 8), 0.5);
        let w = Array4::from_elem((5, 3, 3, 3), 0.1);
        let (y, _) = conv2d_forward(&x.view(), &w.view(), None, 2, 1);
        assert_eq!(y.dim(), (5, 4, 4));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random-ish inputs.
        let x = Array3::from_shape_fn((2, 5, 5), |(c, y, xx)| {
            ((c * 31 + y * 7 + xx * 3) % 11) as f64 - 5.0
        });
        let cols = im2col(&x.view(), 3, 2, 1);
        let c = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 13 + j * 5) % 7) as f64 - 3.0);
        let lhs: f64 = (&cols * &c).sum();
        let folded = col2im(&c.view(), 2, 5, 5, 3, 2, 1);
        let rhs: f64 = (&x * &folded).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
