//! Convolution primitives built on im2col/col2im plus dense matrix products.
//!
//! One geometry serves four passes: conv forward, conv backward,
//! transposed-conv forward and transposed-conv backward all reduce to a
//! column-buffer rearrangement and a `dot`, which keeps the hot path inside
//! the blocked matmul kernel.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Spatial geometry of a (possibly strided, zero-padded) correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel_h,
            kernel_w,
            stride,
            padding,
        }
    }

    /// Output spatial size of a forward correlation over an `(in_h, in_w)` map.
    pub fn out_dims(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let oh = (in_h + 2 * self.padding - self.kernel_h) / self.stride + 1;
        let ow = (in_w + 2 * self.padding - self.kernel_w) / self.stride + 1;
        (oh, ow)
    }

    /// Output size of the transposed pass, i.e. the map whose forward
    /// correlation yields `(in_h, in_w)`.
    pub fn transposed_out_dims(
        &self,
        in_h: usize,
        in_w: usize,
        output_padding: (usize, usize),
    ) -> (usize, usize) {
        let oh = (in_h - 1) * self.stride + self.kernel_h + output_padding.0 - 2 * self.padding;
        let ow = (in_w - 1) * self.stride + self.kernel_w + output_padding.1 - 2 * self.padding;
        (oh, ow)
    }
}

/// Gather input patches into a `(c*kh*kw, oh*ow)` column matrix.
/// Out-of-bounds reads are zeros.
pub fn im2col(input: ArrayView3<f64>, geom: &ConvGeometry) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let (oh, ow) = geom.out_dims(h, w);
    let mut cols = Array2::<f64>::zeros((c * geom.kernel_h * geom.kernel_w, oh * ow));
    let input = input
        .as_slice()
        .expect("im2col expects standard-layout input");
    for ch in 0..c {
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let row = (ch * geom.kernel_h + ki) * geom.kernel_w + kj;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for oi in 0..oh {
                    let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_base = ch * h * w + ii as usize * w;
                    let dst_base = oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[dst_base + oj] = input[src_base + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back onto a `(c, h, w)` map; the adjoint of
/// [`im2col`] under the same geometry.
pub fn col2im(
    cols: ArrayView2<f64>,
    geom: &ConvGeometry,
    c: usize,
    h: usize,
    w: usize,
) -> Array3<f64> {
    let (oh, ow) = geom.out_dims(h, w);
    debug_assert_eq!(cols.dim(), (c * geom.kernel_h * geom.kernel_w, oh * ow));
    let mut out = Array3::<f64>::zeros((c, h, w));
    let out_slice = out.as_slice_mut().unwrap();
    for ch in 0..c {
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let row = (ch * geom.kernel_h + ki) * geom.kernel_w + kj;
                let src = cols.row(row);
                let src = src.as_slice().unwrap();
                for oi in 0..oh {
                    let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_base = ch * h * w + ii as usize * w;
                    let src_base = oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                        if jj >= 0 && jj < w as isize {
                            out_slice[dst_base + jj as usize] += src[src_base + oj];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward correlation: `weights` is `(out_c, in_c*kh*kw)` row-major.
pub fn conv_forward(
    input: ArrayView3<f64>,
    weights: ArrayView2<f64>,
    bias: Option<&[f64]>,
    geom: &ConvGeometry,
) -> Array3<f64> {
    let (_, h, w) = input.dim();
    let (oh, ow) = geom.out_dims(h, w);
    let cols = im2col(input, geom);
    let mut out = weights.dot(&cols);
    if let Some(b) = bias {
        for (mut row, &bv) in out.rows_mut().into_iter().zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    out.into_shape_with_order((weights.dim().0, oh, ow))
        .unwrap()
}

/// Gradient of the forward correlation with respect to its input.
pub fn conv_backward_input(
    grad_out: ArrayView3<f64>,
    weights: ArrayView2<f64>,
    geom: &ConvGeometry,
    in_c: usize,
    in_h: usize,
    in_w: usize,
) -> Array3<f64> {
    let (oc, oh, ow) = grad_out.dim();
    let g2 = grad_out.into_shape_with_order((oc, oh * ow)).unwrap();
    let dcols = weights.t().dot(&g2);
    col2im(dcols.view(), geom, in_c, in_h, in_w)
}

/// Gradient with respect to the `(out_c, in_c*kh*kw)` weight matrix.
pub fn conv_backward_weights(
    input: ArrayView3<f64>,
    grad_out: ArrayView3<f64>,
    geom: &ConvGeometry,
) -> Array2<f64> {
    let (oc, oh, ow) = grad_out.dim();
    let cols = im2col(input, geom);
    let g2 = grad_out.into_shape_with_order((oc, oh * ow)).unwrap();
    g2.dot(&cols.t())
}

/// Per-output-channel sums of the upstream gradient (bias gradient).
pub fn conv_backward_bias(grad_out: ArrayView3<f64>) -> Vec<f64> {
    grad_out
        .outer_iter()
        .map(|plane| plane.sum())
        .collect()
}

/// Transposed correlation: `weights_t` is `(out_c*kh*kw, in_c)`, so that the
/// forward pass is a col2im of `weights_t · input`.
pub fn tconv_forward(
    input: ArrayView3<f64>,
    weights_t: ArrayView2<f64>,
    bias: Option<&[f64]>,
    geom: &ConvGeometry,
    out_c: usize,
    output_padding: (usize, usize),
) -> Array3<f64> {
    let (ic, ih, iw) = input.dim();
    let (oh, ow) = geom.transposed_out_dims(ih, iw, output_padding);
    debug_assert_eq!(geom.out_dims(oh, ow), (ih, iw));
    let x2 = input.into_shape_with_order((ic, ih * iw)).unwrap();
    let cols = weights_t.dot(&x2);
    let mut out = col2im(cols.view(), geom, out_c, oh, ow);
    if let Some(b) = bias {
        for (mut plane, &bv) in out.outer_iter_mut().zip(b.iter()) {
            plane.mapv_inplace(|v| v + bv);
        }
    }
    out
}

/// Gradient of the transposed correlation with respect to its input.
pub fn tconv_backward_input(
    grad_out: ArrayView3<f64>,
    weights_t: ArrayView2<f64>,
    geom: &ConvGeometry,
    in_h: usize,
    in_w: usize,
) -> Array3<f64> {
    let ic = weights_t.dim().1;
    let gcols = im2col(grad_out, geom);
    let dx = weights_t.t().dot(&gcols);
    dx.into_shape_with_order((ic, in_h, in_w)).unwrap()
}

/// Gradient with respect to the `(out_c*kh*kw, in_c)` weight matrix.
pub fn tconv_backward_weights(
    input: ArrayView3<f64>,
    grad_out: ArrayView3<f64>,
    geom: &ConvGeometry,
) -> Array2<f64> {
    let (ic, ih, iw) = input.dim();
    let gcols = im2col(grad_out, geom);
    let x2 = input.into_shape_with_order((ic, ih * iw)).unwrap();
    gcols.dot(&x2.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn finite_diff_conv(
        input: &Array3<f64>,
        weights: &Array2<f64>,
        geom: &ConvGeometry,
        loss: impl Fn(&Array3<f64>) -> f64,
        wrt_input: bool,
    ) -> Vec<f64> {
        let h = 1e-6;
        let mut grads = Vec::new();
        if wrt_input {
            for idx in 0..input.len() {
                let mut plus = input.clone();
                let mut minus = input.clone();
                plus.as_slice_mut().unwrap()[idx] += h;
                minus.as_slice_mut().unwrap()[idx] -= h;
                let lp = loss(&conv_forward(plus.view(), weights.view(), None, geom));
                let lm = loss(&conv_forward(minus.view(), weights.view(), None, geom));
                grads.push((lp - lm) / (2.0 * h));
            }
        } else {
            for idx in 0..weights.len() {
                let mut plus = weights.clone();
                let mut minus = weights.clone();
                plus.as_slice_mut().unwrap()[idx] += h;
                minus.as_slice_mut().unwrap()[idx] -= h;
                let lp = loss(&conv_forward(input.view(), plus.view(), None, geom));
                let lm = loss(&conv_forward(input.view(), minus.view(), None, geom));
                grads.push((lp - lm) / (2.0 * h));
            }
        }
        grads
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let geom = ConvGeometry::new(1, 1, 1, 0);
        let input = Array3::from_shape_fn((1, 3, 4), |(_, i, j)| (i * 4 + j) as f64);
        let weights = Array2::from_elem((1, 1), 1.0);
        let out = conv_forward(input.view(), weights.view(), None, &geom);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_stride2_dims() {
        let geom = ConvGeometry::new(3, 3, 2, 1);
        assert_eq!(geom.out_dims(12, 50), (6, 25));
        assert_eq!(geom.out_dims(6, 25), (3, 13));
    }

    #[test]
    fn tconv_inverts_conv_dims() {
        let geom = ConvGeometry::new(3, 3, 2, 1);
        // 12x50 -> 6x25 under conv; recover 12x50 with output padding (1,1).
        assert_eq!(geom.transposed_out_dims(6, 25, (1, 1)), (12, 50));
        assert_eq!(geom.transposed_out_dims(3, 13, (1, 0)), (6, 25));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let geom = ConvGeometry::new(3, 3, 2, 1);
        let input = Array3::from_shape_fn((2, 5, 6), |(c, i, j)| {
            ((c * 31 + i * 7 + j * 3) % 13) as f64 * 0.17 - 0.8
        });
        let weights = Array2::from_shape_fn((3, 2 * 9), |(o, k)| {
            ((o * 17 + k * 5) % 11) as f64 * 0.09 - 0.45
        });
        // loss = sum of squares of the output
        let loss = |y: &Array3<f64>| y.iter().map(|v| v * v).sum::<f64>();
        let out = conv_forward(input.view(), weights.view(), None, &geom);
        let grad_out = out.mapv(|v| 2.0 * v);

        let dx = conv_backward_input(grad_out.view(), weights.view(), &geom, 2, 5, 6);
        let fd = finite_diff_conv(&input, &weights, &geom, loss, true);
        for (a, b) in dx.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6, "input grad {a} vs fd {b}");
        }

        let dw = conv_backward_weights(input.view(), grad_out.view(), &geom);
        let fd = finite_diff_conv(&input, &weights, &geom, loss, false);
        for (a, b) in dw.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6, "weight grad {a} vs fd {b}");
        }
    }

    #[test]
    fn tconv_backward_matches_finite_differences() {
        let geom = ConvGeometry::new(3, 3, 2, 1);
        let input = Array3::from_shape_fn((3, 3, 4), |(c, i, j)| {
            ((c * 13 + i * 5 + j) % 7) as f64 * 0.21 - 0.6
        });
        let weights_t = Array2::from_shape_fn((2 * 9, 3), |(r, c)| {
            ((r * 3 + c * 11) % 9) as f64 * 0.11 - 0.4
        });
        let op = (1, 1);
        let fwd = |x: &Array3<f64>, w: &Array2<f64>| {
            tconv_forward(x.view(), w.view(), None, &geom, 2, op)
        };
        let loss = |y: &Array3<f64>| y.iter().map(|v| v * v).sum::<f64>();
        let out = fwd(&input, &weights_t);
        let grad_out = out.mapv(|v| 2.0 * v);

        let dx = tconv_backward_input(grad_out.view(), weights_t.view(), &geom, 3, 4);
        let dw = tconv_backward_weights(input.view(), grad_out.view(), &geom);

        let h = 1e-6;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&fwd(&plus, &weights_t)) - loss(&fwd(&minus, &weights_t))) / (2.0 * h);
            let a = dx.as_slice().unwrap()[idx];
            assert!((a - fd).abs() < 1e-6, "tconv input grad {a} vs fd {fd}");
        }
        for idx in 0..weights_t.len() {
            let mut plus = weights_t.clone();
            let mut minus = weights_t.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&fwd(&input, &plus)) - loss(&fwd(&input, &minus))) / (2.0 * h);
            let a = dw.as_slice().unwrap()[idx];
            assert!((a - fd).abs() < 1e-6, "tconv weight grad {a} vs fd {fd}");
        }
    }
}
