//! Per-sample layer kernels: forward and backward passes over flat f64
//! buffers. All loops are written against contiguous row-major storage.

use super::spec::FeatShape;

pub(crate) struct ConvDims {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn new(input: FeatShape, out_channels: usize, kernel: usize, stride: usize) -> ConvDims {
        let FeatShape::Map { c, h, w } = input else {
            panic!("conv input must be a map");
        };
        ConvDims {
            in_c: c,
            in_h: h,
            in_w: w,
            out_c: out_channels,
            out_h: (h - kernel) / stride + 1,
            out_w: (w - kernel) / stride + 1,
            kernel,
            stride,
        }
    }
}

/// Valid (no padding) cross-correlation of one sample.
pub(crate) fn conv_forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    d: &ConvDims,
) -> Vec<f64> {
    let mut out = vec![0.0; d.out_c * d.out_h * d.out_w];
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let w_per_oc = d.in_c * d.kernel * d.kernel;
    for oc in 0..d.out_c {
        let out_base = oc * out_plane;
        out[out_base..out_base + out_plane].fill(bias[oc]);
        for ic in 0..d.in_c {
            let in_base = ic * in_plane;
            for ky in 0..d.kernel {
                for kx in 0..d.kernel {
                    let w = weights[oc * w_per_oc + ic * d.kernel * d.kernel + ky * d.kernel + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for oy in 0..d.out_h {
                        let iy = oy * d.stride + ky;
                        let in_row = &input[in_base + iy * d.in_w + kx..];
                        let out_row = &mut out[out_base + oy * d.out_w..out_base + (oy + 1) * d.out_w];
                        if d.stride == 1 {
                            for (o, i) in out_row.iter_mut().zip(&in_row[..d.out_w]) {
                                *o += w * i;
                            }
                        } else {
                            for ox in 0..d.out_w {
                                out_row[ox] += w * in_row[ox * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of one conv sample. Returns the input gradient and
/// accumulates weight/bias gradients into `d_weights` / `d_bias`.
pub(crate) fn conv_backward(
    input: &[f64],
    weights: &[f64],
    d_out: &[f64],
    d: &ConvDims,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let mut d_in = vec![0.0; d.in_c * d.in_h * d.in_w];
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let w_per_oc = d.in_c * d.kernel * d.kernel;
    for oc in 0..d.out_c {
        let out_base = oc * out_plane;
        let mut b_acc = 0.0;
        for v in &d_out[out_base..out_base + out_plane] {
            b_acc += v;
        }
        d_bias[oc] += b_acc;
        for ic in 0..d.in_c {
            let in_base = ic * in_plane;
            for ky in 0..d.kernel {
                for kx in 0..d.kernel {
                    let w_idx = oc * w_per_oc + ic * d.kernel * d.kernel + ky * d.kernel + kx;
                    let w = weights[w_idx];
                    let mut w_acc = 0.0;
                    for oy in 0..d.out_h {
                        let iy = oy * d.stride + ky;
                        let in_row = &input[in_base + iy * d.in_w + kx..];
                        let d_in_row = &mut d_in[in_base + iy * d.in_w + kx..];
                        let d_out_row = &d_out[out_base + oy * d.out_w..out_base + (oy + 1) * d.out_w];
                        if d.stride == 1 {
                            for (ox, &g) in d_out_row.iter().enumerate() {
                                w_acc += g * in_row[ox];
                                d_in_row[ox] += g * w;
                            }
                        } else {
                            for (ox, &g) in d_out_row.iter().enumerate() {
                                w_acc += g * in_row[ox * d.stride];
                                d_in_row[ox * d.stride] += g * w;
                            }
                        }
                    }
                    d_weights[w_idx] += w_acc;
                }
            }
        }
    }
    d_in
}

pub(crate) fn relu_forward(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn relu_backward(input: &[f64], d_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(d_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Non-overlapping max pooling. Returns outputs and the flat input index of
/// each window maximum (first occurrence wins ties).
pub(crate) fn maxpool_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = h / window;
    let ow = w / window;
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..window {
                    let iy = oy * window + dy;
                    for dx in 0..window {
                        let ix = ox * window + dx;
                        let idx = base + iy * w + ix;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool_backward(d_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; input_len];
    for (o, &idx) in argmax.iter().enumerate() {
        d_in[idx] += d_out[o];
    }
    d_in
}

/// Dense layer: `out = input · W + b` with `W` stored input-major
/// (shape `[in, units]`).
pub(crate) fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64], units: usize) -> Vec<f64> {
    let mut out = bias.to_vec();
    for (i, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &weights[i * units..(i + 1) * units];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += x * w;
        }
    }
    out
}

pub(crate) fn dense_backward(
    input: &[f64],
    weights: &[f64],
    d_out: &[f64],
    units: usize,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    for (db, &g) in d_bias.iter_mut().zip(d_out) {
        *db += g;
    }
    let mut d_in = vec![0.0; input.len()];
    for (i, &x) in input.iter().enumerate() {
        let row = &weights[i * units..(i + 1) * units];
        let d_row = &mut d_weights[i * units..(i + 1) * units];
        let mut acc = 0.0;
        for ((&w, dw), &g) in row.iter().zip(d_row.iter_mut()).zip(d_out) {
            acc += w * g;
            *dw += x * g;
        }
        d_in[i] = acc;
    }
    d_in
}
