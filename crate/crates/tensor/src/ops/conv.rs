//! 2-D convolution and fractionally-strided (transposed) convolution.
//!
//! Both directions route through im2col/col2im plus GEMM. The transposed
//! forward is exactly the input-gradient operator of `conv2d`, which makes the
//! adjoint identity `<conv(x,w), y> == <x, conv_t(y,w)>` hold by construction.
//!
//! Weight layout is shared: `[K, C, kh, kw]`. `conv2d` maps C input channels
//! to K outputs; `conv_transpose2d` maps K input channels back to C.

use super::gemm::matmul_rm;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Output spatial dims of `conv2d` for the given input dims.
pub fn conv2d_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return None;
    }
    Some(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// Output spatial dims of `conv_transpose2d`.
pub fn conv_transpose2d_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<(usize, usize)> {
    if stride == 0 || output_pad >= stride {
        return None;
    }
    let oh = (h - 1) * stride + kh + output_pad;
    let ow = (w - 1) * stride + kw + output_pad;
    if oh < 2 * pad + 1 || ow < 2 * pad + 1 {
        return None;
    }
    Some((oh - 2 * pad, ow - 2 * pad))
}

/// Gather windows: `src [C,H,W]` -> `col [C*kh*kw, OH*OW]`, zero-filled
/// outside the padded extent.
fn im2col(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    col.fill(0.0);
    let spatial = oh * ow;
    for ch in 0..c {
        let src_plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * spatial;
                for oy in 0..oh {
                    let sy = (oy * stride + i) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if stride == 1 {
                        // contiguous run of valid source columns
                        let ox0 = pad.saturating_sub(j);
                        let ox1 = (w + pad - j).min(ow);
                        if ox0 < ox1 {
                            let sx0 = ox0 + j - pad;
                            dst[ox0..ox1].copy_from_slice(&src_row[sx0..sx0 + (ox1 - ox0)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let sx = (ox * stride + j) as isize - pad as isize;
                            if sx >= 0 && sx < w as isize {
                                *d = src_row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add windows back: adjoint of `im2col`.
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f32],
) {
    debug_assert_eq!(dst.len(), c * h * w);
    let spatial = oh * ow;
    for ch in 0..c {
        let dst_plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * spatial;
                for oy in 0..oh {
                    let sy = (oy * stride + i) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst_plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    if stride == 1 {
                        let ox0 = pad.saturating_sub(j);
                        let ox1 = (w + pad - j).min(ow);
                        if ox0 < ox1 {
                            let sx0 = ox0 + j - pad;
                            for (d, s) in dst_row[sx0..sx0 + (ox1 - ox0)].iter_mut().zip(&src[ox0..ox1])
                            {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let sx = (ox * stride + j) as isize - pad as isize;
                            if sx >= 0 && sx < w as isize {
                                dst_row[sx as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn transpose_mat(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// c[m,n] += a[m,k] * b[n,k]^T (beta controls accumulation).
fn matmul_nt(m: usize, k: usize, n: usize, a: &[f32], b_nk: &[f32], c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b_nk.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        if k == 0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b_nk.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvArgs {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn validate_conv(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    bias_ch: usize,
    stride: usize,
) -> Result<()> {
    if input.shape().len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("input must be NCHW, got {:?}", input.shape()),
        });
    }
    if weight.shape().len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("weight must be [K,C,kh,kw], got {:?}", weight.shape()),
        });
    }
    if bias.shape() != [bias_ch] {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("bias must be [{}], got {:?}", bias_ch, bias.shape()),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            detail: "stride must be >= 1".into(),
        });
    }
    if !input.data().iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op, what: "input" });
    }
    if !weight.data().iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op, what: "weight" });
    }
    Ok(())
}

/// 2-D convolution of `input [N,C,H,W]` with `weight [K,C,kh,kw]` plus
/// per-channel bias, differentiable w.r.t. all three.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    validate_conv("conv2d", input, weight, bias, weight.shape()[0], stride)?;
    let (n, c, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (k, wc, kh, kw) = {
        let s = weight.shape();
        (s[0], s[1], s[2], s[3])
    };
    if wc != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {} channels, weight expects {}", c, wc),
        });
    }
    let Some((oh, ow)) = conv2d_output_dims(h, w, kh, kw, stride, pad) else {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "kernel {}x{} does not fit {}x{} input with pad {}",
                kh, kw, h, w, pad
            ),
        });
    };
    let args = ConvArgs { n, c, h, w, k, kh, kw, stride, pad, oh, ow };

    let ckk = c * kh * kw;
    let spatial = oh * ow;
    let mut out = vec![0.0f32; n * k * spatial];
    let mut cols: Vec<Vec<f32>> = Vec::with_capacity(n);
    {
        let in_data = input.data();
        let w_data = weight.data();
        let b_data = bias.data();
        for s_idx in 0..n {
            let mut col = vec![0.0f32; ckk * spatial];
            im2col(
                &in_data[s_idx * c * h * w..(s_idx + 1) * c * h * w],
                c, h, w, kh, kw, stride, pad, oh, ow, &mut col,
            );
            let out_s = &mut out[s_idx * k * spatial..(s_idx + 1) * k * spatial];
            matmul_rm(k, ckk, spatial, &w_data, &col, out_s, 0.0);
            for ch in 0..k {
                let bv = b_data[ch];
                for v in &mut out_s[ch * spatial..(ch + 1) * spatial] {
                    *v += bv;
                }
            }
            cols.push(col);
        }
    }

    let (p_in, p_w) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![n, k, oh, ow],
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g| {
            let ConvArgs { n, c, h, w, k, kh, kw, stride, pad, oh, ow } = args;
            let ckk = c * kh * kw;
            let spatial = oh * ow;
            let w_data = p_w.data();
            let need_input_grad = p_in.requires_grad();

            let mut g_in = vec![0.0f32; n * c * h * w];
            let mut g_w = vec![0.0f32; k * ckk];
            let mut g_b = vec![0.0f32; k];
            let w_t = if need_input_grad {
                transpose_mat(&w_data, k, ckk)
            } else {
                Vec::new()
            };
            let mut g_col = vec![0.0f32; ckk * spatial];
            for s_idx in 0..n {
                let g_s = &g[s_idx * k * spatial..(s_idx + 1) * k * spatial];
                for ch in 0..k {
                    g_b[ch] += g_s[ch * spatial..(ch + 1) * spatial].iter().sum::<f32>();
                }
                // dW += dOut * col^T
                matmul_nt(k, spatial, ckk, g_s, &cols[s_idx], &mut g_w, 1.0);
                if need_input_grad {
                    // dCol = W^T * dOut, then scatter back
                    matmul_rm(ckk, k, spatial, &w_t, g_s, &mut g_col, 0.0);
                    col2im(
                        &g_col,
                        c, h, w, kh, kw, stride, pad, oh, ow,
                        &mut g_in[s_idx * c * h * w..(s_idx + 1) * c * h * w],
                    );
                }
            }
            vec![
                if need_input_grad { Some(g_in) } else { None },
                Some(g_w),
                Some(g_b),
            ]
        }),
    ))
}

/// Fractionally-strided convolution: the adjoint of `conv2d` with the same
/// weight. `input [N,K,H,W]`, `weight [K,C,kh,kw]`, output `[N,C,OH,OW]` with
/// `OH = (H-1)*stride - 2*pad + kh + output_pad`.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<Tensor> {
    validate_conv(
        "conv_transpose2d",
        input,
        weight,
        bias,
        weight.shape()[1],
        stride,
    )?;
    let (n, ic, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (k, c, kh, kw) = {
        let s = weight.shape();
        (s[0], s[1], s[2], s[3])
    };
    if ic != k {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("input has {} channels, weight expects {}", ic, k),
        });
    }
    if output_pad >= stride {
        return Err(TensorError::InvalidArgument {
            op: "conv_transpose2d",
            detail: format!("output_pad {} must be < stride {}", output_pad, stride),
        });
    }
    let Some((oh, ow)) = conv_transpose2d_output_dims(h, w, kh, kw, stride, pad, output_pad) else {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("no valid output extent for {}x{} input", h, w),
        });
    };

    let ckk = c * kh * kw;
    let in_spatial = h * w;
    // Scatter target carries the implicit pad border; crop afterwards.
    let (ph, pw) = (oh + 2 * pad, ow + 2 * pad);
    let mut out = vec![0.0f32; n * c * oh * ow];
    {
        let in_data = input.data();
        let w_data = weight.data();
        let b_data = bias.data();
        let w_t = transpose_mat(&w_data, k, ckk); // [CKK, K]
        let mut g_col = vec![0.0f32; ckk * in_spatial];
        let mut padded = vec![0.0f32; c * ph * pw];
        for s_idx in 0..n {
            let in_s = &in_data[s_idx * k * in_spatial..(s_idx + 1) * k * in_spatial];
            matmul_rm(ckk, k, in_spatial, &w_t, in_s, &mut g_col, 0.0);
            padded.fill(0.0);
            col2im(&g_col, c, ph, pw, kh, kw, stride, 0, h, w, &mut padded);
            let out_s = &mut out[s_idx * c * oh * ow..(s_idx + 1) * c * oh * ow];
            for ch in 0..c {
                let bv = b_data[ch];
                for y in 0..oh {
                    let src = &padded[ch * ph * pw + (y + pad) * pw + pad..];
                    let dst = &mut out_s[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
                    for (d, s) in dst.iter_mut().zip(&src[..ow]) {
                        *d = s + bv;
                    }
                }
            }
        }
    }

    let args = ConvArgs { n, c, h, w, k, kh, kw, stride, pad, oh, ow };
    let (p_in, p_w) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g| {
            let ConvArgs { n, c, h, w, k, kh, kw, stride, pad, oh, ow } = args;
            let ckk = c * kh * kw;
            let in_spatial = h * w;
            let in_data = p_in.data();
            let w_data = p_w.data();

            let mut g_in = vec![0.0f32; n * k * in_spatial];
            let mut g_w = vec![0.0f32; k * ckk];
            let mut g_b = vec![0.0f32; c];
            // dOut gathered against the adjoint conv reproduces H*W windows.
            let mut g_col = vec![0.0f32; ckk * in_spatial];
            for s_idx in 0..n {
                let g_s = &g[s_idx * c * oh * ow..(s_idx + 1) * c * oh * ow];
                for ch in 0..c {
                    g_b[ch] += g_s[ch * oh * ow..(ch + 1) * oh * ow].iter().sum::<f32>();
                }
                im2col(g_s, c, oh, ow, kh, kw, stride, pad, h, w, &mut g_col);
                // dIn = W * gathered(dOut)
                matmul_rm(
                    k,
                    ckk,
                    in_spatial,
                    &w_data,
                    &g_col,
                    &mut g_in[s_idx * k * in_spatial..(s_idx + 1) * k * in_spatial],
                    0.0,
                );
                // dW += In * gathered(dOut)^T
                let in_s = &in_data[s_idx * k * in_spatial..(s_idx + 1) * k * in_spatial];
                matmul_nt(k, in_spatial, ckk, in_s, &g_col, &mut g_w, 1.0);
            }
            vec![Some(g_in), Some(g_w), Some(g_b)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sum};

    fn t(data: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = t((1..=9).map(|v| v as f32).collect(), &[1, 1, 3, 3]);
        let w = t(vec![1.0], &[1, 1, 1, 1]);
        let b = t(vec![0.0], &[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn constant_field_box_sum() {
        let x = t(vec![1.0; 25], &[1, 1, 5, 5]);
        let w = t(vec![1.0; 9], &[1, 1, 3, 3]);
        let b = t(vec![0.0], &[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.to_vec().iter().all(|v| (*v - 9.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = t(vec![0.0; 2 * 9], &[1, 2, 3, 3]);
        let w = t(vec![0.0; 9], &[1, 1, 3, 3]);
        let b = t(vec![0.0], &[1]);
        assert!(conv2d(&x, &w, &b, 1, 0).is_err());
    }

    #[test]
    fn rejects_oversized_kernel() {
        let x = t(vec![0.0; 4], &[1, 1, 2, 2]);
        let w = t(vec![0.0; 9], &[1, 1, 3, 3]);
        let b = t(vec![0.0], &[1]);
        assert!(conv2d(&x, &w, &b, 1, 0).is_err());
    }

    #[test]
    fn transpose_stride2_doubles_extent() {
        let x = t(vec![1.0; 16], &[1, 1, 4, 4]);
        let w = t(vec![0.5; 2 * 9], &[1, 2, 3, 3]);
        let b = t(vec![0.0; 2], &[2]);
        let y = conv_transpose2d(&x, &w, &b, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn transpose_identity_kernel() {
        let x = t((1..=16).map(|v| v as f32).collect(), &[1, 1, 4, 4]);
        let w = t(vec![1.0], &[1, 1, 1, 1]);
        let b = t(vec![0.0], &[1]);
        let y = conv_transpose2d(&x, &w, &b, 1, 0, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn transpose_rejects_output_pad_ge_stride() {
        let x = t(vec![1.0; 16], &[1, 1, 4, 4]);
        let w = t(vec![0.5; 9], &[1, 1, 3, 3]);
        let b = t(vec![0.0], &[1]);
        assert!(conv_transpose2d(&x, &w, &b, 1, 0, 1).is_err());
    }

    #[test]
    fn conv_rejects_non_finite_input() {
        let x = t(vec![1.0; 9], &[1, 1, 3, 3]);
        // bypass from_vec validation by poking data through a param update
        let xp = Tensor::param(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        xp.copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let w = t(vec![1.0], &[1, 1, 1, 1]);
        let b = t(vec![0.0], &[1]);
        assert!(conv2d(&x, &w, &b, 1, 0).is_ok());
        // now a genuinely non-finite buffer
        let bad = Tensor::param(vec![0.0; 9], &[1, 1, 3, 3]).unwrap();
        bad.update_data_for_test(|d| d[4] = f32::INFINITY);
        assert!(conv2d(&bad, &w, &b, 1, 0).is_err());
    }

    #[test]
    fn transpose_forward_matches_conv_input_gradient() {
        // forward of conv_transpose2d == backward-w.r.t.-input of conv2d
        let mut rng = crate::rng::Rng::new(11);
        for &(c_in, c_out, kh, stride, pad) in
            &[(1usize, 2usize, 3usize, 1usize, 0usize), (2, 3, 3, 2, 1), (3, 1, 4, 2, 1)]
        {
            let (h, w) = (6, 7);
            let x: Vec<f32> = (0..c_in * h * w).map(|_| rng.normal()).collect();
            let wt: Vec<f32> = (0..c_out * c_in * kh * kh).map(|_| rng.normal()).collect();
            let (oh, ow) = conv2d_output_dims(h, w, kh, kh, stride, pad).unwrap();
            let gy: Vec<f32> = (0..c_out * oh * ow).map(|_| rng.normal()).collect();

            // route 1: autodiff through conv2d with a linear probe
            let xp = Tensor::param(x.clone(), &[1, c_in, h, w]).unwrap();
            let wt_t = t(wt.clone(), &[c_out, c_in, kh, kh]);
            let b0 = t(vec![0.0; c_out], &[c_out]);
            let y = conv2d(&xp, &wt_t, &b0, stride, pad).unwrap();
            let probe = t(gy.clone(), &[1, c_out, oh, ow]);
            sum(&mul(&y, &probe).unwrap()).backward().unwrap();
            let grad_route = xp.grad().unwrap();

            // route 2: conv_transpose2d forward on the probe
            let opad = h - ((oh - 1) * stride + kh - 2 * pad);
            let gy_t = t(gy, &[1, c_out, oh, ow]);
            let bc = t(vec![0.0; c_in], &[c_in]);
            let direct = conv_transpose2d(&gy_t, &wt_t, &bc, stride, pad, opad).unwrap();
            assert_eq!(direct.shape(), &[1, c_in, h, w]);
            let max_diff = direct
                .to_vec()
                .iter()
                .zip(&grad_route)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 1e-4, "max diff {max_diff}");
        }
    }
}
