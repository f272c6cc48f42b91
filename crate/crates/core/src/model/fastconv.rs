//! Convolution expressed through pad / slice / matmul primitives.
//!
//! The CPU backend's native `conv2d` has a fast forward but derives its
//! input gradient through a naive scalar-loop transposed convolution, which
//! dominates training time. Building the convolution out of primitives lets
//! autodiff compose the backward pass from the same fast (SIMD matmul)
//! kernels as the forward pass. The result is numerically the standard
//! im2col formulation of cross-correlation.

use burn::nn::conv::Conv2d;
use burn::nn::PaddingConfig2d;
use burn::prelude::*;

/// Rows `start, start+stride, ...` of the height axis (`out` of them).
fn take_strided_rows<B: Backend>(
    x: Tensor<B, 4>,
    start: usize,
    out: usize,
    stride: usize,
) -> Tensor<B, 4> {
    if stride == 1 {
        return x.narrow(2, start, out);
    }
    let [b, c, _, w] = x.dims();
    x.narrow(2, start, stride * out)
        .reshape([b, c, out, stride, w])
        .narrow(3, 0, 1)
        .reshape([b, c, out, w])
}

/// Columns `start, start+stride, ...` of the width axis (`out` of them).
fn take_strided_cols<B: Backend>(
    x: Tensor<B, 4>,
    start: usize,
    out: usize,
    stride: usize,
) -> Tensor<B, 4> {
    if stride == 1 {
        return x.narrow(3, start, out);
    }
    let [b, c, h, _] = x.dims();
    x.narrow(3, start, stride * out)
        .reshape([b, c, h, out, stride])
        .narrow(4, 0, 1)
        .reshape([b, c, h, out])
}

/// 2D cross-correlation with square kernel, symmetric padding and equal
/// strides. `weight` is `(c_out, c_in, k, k)`, `bias` is `(c_out)`.
pub fn shift_conv2d<B: Backend>(
    x: Tensor<B, 4>,
    weight: Tensor<B, 4>,
    bias: Option<Tensor<B, 1>>,
    stride: usize,
    pad: usize,
) -> Tensor<B, 4> {
    let [b, c_in, h, w] = x.dims();
    let [c_out, w_in, k, _] = weight.dims();
    debug_assert_eq!(c_in, w_in, "channel mismatch");
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    // Extra bottom/right padding so every strided window slice fits.
    let xp = if pad + stride > 1 {
        x.pad((pad, pad + stride - 1, pad, pad + stride - 1), 0.0)
    } else {
        x
    };

    let n = b * out_h * out_w;
    let mut blocks = Vec::with_capacity(k * k);
    for kh in 0..k {
        let rows = take_strided_rows(xp.clone(), kh, out_h, stride);
        for kw in 0..k {
            let win = take_strided_cols(rows.clone(), kw, out_w, stride);
            blocks.push(win.swap_dims(0, 1).reshape([c_in, n]));
        }
    }
    // (k*k*c_in, n) columns; weight rearranged to the matching (kh, kw, c_in)
    // ordering.
    let cols = Tensor::cat(blocks, 0);
    let wmat = weight
        .reshape([c_out, c_in, k * k])
        .swap_dims(1, 2)
        .reshape([c_out, k * k * c_in]);
    let out = wmat
        .matmul(cols)
        .reshape([c_out, b, out_h, out_w])
        .swap_dims(0, 1);
    match bias {
        Some(bias) => out + bias.reshape([1, c_out, 1, 1]),
        None => out,
    }
}

/// [`shift_conv2d`] driven by a `Conv2d` module's parameters, replacing its
/// native forward.
pub fn conv2d_fast<B: Backend>(conv: &Conv2d<B>, x: Tensor<B, 4>) -> Tensor<B, 4> {
    debug_assert_eq!(conv.groups, 1);
    debug_assert_eq!(conv.dilation, [1, 1]);
    debug_assert_eq!(conv.stride[0], conv.stride[1]);
    let pad = match &conv.padding.0 {
        PaddingConfig2d::Explicit(p, q) => {
            debug_assert_eq!(p, q);
            *p
        }
        PaddingConfig2d::Valid => 0,
        other => unimplemented!("padding {other:?}"),
    };
    shift_conv2d(
        x,
        conv.weight.val(),
        conv.bias.as_ref().map(|b| b.val()),
        conv.stride[0],
        pad,
    )
}
