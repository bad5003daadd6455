//! Differentiable operations.
//!
//! Elementwise and reduction ops live here; convolution kernels in `conv`,
//! instance normalization in `norm`. Every op validates its shape contract
//! and registers a backward closure when gradients are being recorded.

mod conv;
mod gemm;
mod norm;

pub use conv::{conv2d, conv_transpose2d, conv2d_output_dims, conv_transpose2d_output_dims};
pub use gemm::{kernel_threads, set_kernel_threads};
pub use norm::instance_norm;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let shape = a.shape().to_vec();
    Ok(Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

/// Elementwise difference `a - b`.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    let shape = a.shape().to_vec();
    Ok(Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|g| {
            vec![
                Some(g.to_vec()),
                Some(g.iter().map(|v| -v).collect()),
            ]
        }),
    ))
}

/// Elementwise product of two same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let shape = a.shape().to_vec();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let da = g.iter().zip(pb.data().iter()).map(|(gv, bv)| gv * bv).collect();
            let db = g.iter().zip(pa.data().iter()).map(|(gv, av)| gv * av).collect();
            vec![Some(da), Some(db)]
        }),
    ))
}

pub fn add_scalar(a: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x + s).collect();
    let shape = a.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone()],
        Box::new(|g| vec![Some(g.to_vec())]),
    )
}

pub fn mul_scalar(a: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x * s).collect();
    let shape = a.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|v| v * s).collect())]),
    )
}

/// Exact elementwise division by a scalar (not `mul` by reciprocal).
pub fn div_scalar(a: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x / s).collect();
    let shape = a.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|v| v / s).collect())]),
    )
}

pub fn square(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x * x).collect();
    let shape = a.shape().to_vec();
    let pa = a.clone();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone()],
        Box::new(move |g| {
            vec![Some(
                g.iter().zip(pa.data().iter()).map(|(gv, av)| 2.0 * av * gv).collect(),
            )]
        }),
    )
}

/// Elementwise absolute value; subgradient 0 at the kink.
pub fn abs(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x.abs()).collect();
    let shape = a.shape().to_vec();
    let pa = a.clone();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone()],
        Box::new(move |g| {
            let da = g
                .iter()
                .zip(pa.data().iter())
                .map(|(gv, av)| {
                    if *av > 0.0 {
                        *gv
                    } else if *av < 0.0 {
                        -*gv
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Some(da)]
        }),
    )
}

pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x.max(0.0)).collect();
    let shape = a.shape().to_vec();
    let pa = a.clone();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone()],
        Box::new(move |g| {
            let da = g
                .iter()
                .zip(pa.data().iter())
                .map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 })
                .collect();
            vec![Some(da)]
        }),
    )
}

pub fn leaky_relu(a: &Tensor, slope: f32) -> Tensor {
    let data: Vec<f32> = a
        .data()
        .iter()
        .map(|x| if *x > 0.0 { *x } else { slope * x })
        .collect();
    let shape = a.shape().to_vec();
    let pa = a.clone();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone()],
        Box::new(move |g| {
            let da = g
                .iter()
                .zip(pa.data().iter())
                .map(|(gv, av)| if *av > 0.0 { *gv } else { slope * gv })
                .collect();
            vec![Some(da)]
        }),
    )
}

pub fn tanh(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x.tanh()).collect();
    let shape = a.shape().to_vec();
    let saved = data.clone();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone()],
        Box::new(move |g| {
            let da = g
                .iter()
                .zip(saved.iter())
                .map(|(gv, yv)| gv * (1.0 - yv * yv))
                .collect();
            vec![Some(da)]
        }),
    )
}

/// Mean over all elements, as a `[1]` tensor.
pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel();
    let m = a.data().iter().sum::<f32>() / n as f32;
    Tensor::from_op(
        vec![m],
        vec![1],
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0] / n as f32; n])]),
    )
}

/// Sum over all elements, as a `[1]` tensor.
pub fn sum(a: &Tensor) -> Tensor {
    let n = a.numel();
    let s = a.data().iter().sum::<f32>();
    Tensor::from_op(
        vec![s],
        vec![1],
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0]; n])]),
    )
}

/// Concatenate two NCHW tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            detail: format!("{:?} vs {:?}", sa, sb),
        });
    }
    let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    {
        let da = a.data();
        let db = b.data();
        for i in 0..n {
            data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![n, ca + cb, h, w],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0f32; n * ca * plane];
            let mut gb = vec![0.0f32; n * cb * plane];
            let stride = (ca + cb) * plane;
            for i in 0..n {
                ga[i * ca * plane..(i + 1) * ca * plane]
                    .copy_from_slice(&g[i * stride..i * stride + ca * plane]);
                gb[i * cb * plane..(i + 1) * cb * plane]
                    .copy_from_slice(&g[i * stride + ca * plane..(i + 1) * stride]);
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Reflection-pad the two spatial axes of an NCHW tensor.
pub fn reflect_pad2d(a: &Tensor, pad: usize) -> Result<Tensor> {
    let s = a.shape().to_vec();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "reflect_pad2d",
            detail: format!("expected NCHW, got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if pad >= h || pad >= w {
        return Err(TensorError::InvalidArgument {
            op: "reflect_pad2d",
            detail: format!("pad {} too large for {}x{}", pad, h, w),
        });
    }
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    // Mirror index without repeating the edge sample.
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
        i as usize
    };
    let mut data = vec![0.0f32; n * c * oh * ow];
    {
        let src = a.data();
        for nc in 0..n * c {
            let sp = nc * h * w;
            let dp = nc * oh * ow;
            for oy in 0..oh {
                let sy = reflect(oy as isize - pad as isize, h);
                for ox in 0..ow {
                    let sx = reflect(ox as isize - pad as isize, w);
                    data[dp + oy * ow + ox] = src[sp + sy * w + sx];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![n, c, oh, ow],
        vec![a.clone()],
        Box::new(move |g| {
            let mut da = vec![0.0f32; n * c * h * w];
            for nc in 0..n * c {
                let sp = nc * h * w;
                let dp = nc * oh * ow;
                for oy in 0..oh {
                    let sy = reflect(oy as isize - pad as isize, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize - pad as isize, w);
                        da[sp + sy * w + sx] += g[dp + oy * ow + ox];
                    }
                }
            }
            vec![Some(da)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn activation_values() {
        let x = t(&[-2.0, 3.0, 0.0, -1.0], &[4]);
        assert_eq!(relu(&x).to_vec(), vec![0.0, 3.0, 0.0, 0.0]);
        assert_eq!(tanh(&t(&[0.0], &[1])).to_vec(), vec![0.0]);
        let lr = leaky_relu(&t(&[-1.0], &[1]), 0.2);
        assert!((lr.to_vec()[0] + 0.2).abs() < 1e-7);
    }

    #[test]
    fn tanh_stays_inside_open_interval() {
        let x = t(&[-50.0, -3.0, 0.5, 50.0], &[4]);
        for v in tanh(&x).to_vec() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[1.0, 2.0, 3.0], &[3]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn mean_and_sum() {
        let x = t(&[1.0, 2.0, 3.0, 6.0], &[2, 2]);
        assert_eq!(mean(&x).item(), 3.0);
        assert_eq!(sum(&x).item(), 12.0);
    }

    #[test]
    fn concat_splits_gradient() {
        let a = Tensor::param(vec![1.0; 4], &[1, 1, 2, 2]).unwrap();
        let b = Tensor::param(vec![2.0; 8], &[1, 2, 2, 2]).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        sum(&mul_scalar(&c, 2.0)).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![2.0; 8]);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        // row [1 2 3], pad 1 -> [2 1 2 3 2]
        let x = t(&[1.0, 2.0, 3.0], &[1, 1, 1, 3]);
        let err = reflect_pad2d(&x, 1).unwrap_err();
        // pad >= h is rejected for the 1-row case
        assert!(matches!(err, TensorError::InvalidArgument { .. }));

        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 1, 3, 3]);
        let y = reflect_pad2d(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        let d = y.to_vec();
        // centre row of padded output mirrors [4 5 6] -> [5 4 5 6 5]
        assert_eq!(&d[10..15], &[5.0, 4.0, 5.0, 6.0, 5.0]);
    }
}
