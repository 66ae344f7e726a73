//! Pure forward/backward kernels shared by inference and the autodiff tape.
//!
//! All loops accumulate in a fixed order so repeated runs are bit-identical.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn pad_input<T: Scalar>(x: &Tensor<T>, padding: usize) -> (Vec<T>, usize, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let mut buf = vec![T::zero(); c * hp * wp];
    let xd = x.data();
    for ci in 0..c {
        for y in 0..h {
            let src = ci * h * w + y * w;
            let dst = ci * hp * wp + (y + padding) * wp + padding;
            buf[dst..dst + w].copy_from_slice(&xd[src..src + w]);
        }
    }
    (buf, c, hp, wp)
}

/// 2-D convolution: input `[C,H,W]`, kernels `[K,C,h,w]`, bias `[K]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if x.shape().len() != 3 || w.shape().len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("want input [C,H,W] and kernels [K,C,h,w], got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (c, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, kc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but kernels expect {kc}"),
        ));
    }
    if b.shape() != [k] {
        return Err(Error::shape("conv2d", format!("bias shape {:?}, want [{k}]", b.shape())));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    if kh > h + 2 * padding || kw > ww + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, ww + 2 * padding),
        ));
    }
    let (pad, _, hp, wp) = pad_input(x, padding);
    let (ho, wo) = (conv_out_dim(h, kh, stride, padding), conv_out_dim(ww, kw, stride, padding));
    let mut out = vec![T::zero(); k * ho * wo];
    let wd = w.data();
    let bd = b.data();
    for ki in 0..k {
        for yo in 0..ho {
            for xo in 0..wo {
                let mut acc = bd[ki];
                for ci in 0..c {
                    for i in 0..kh {
                        let row = ci * hp * wp + (yo * stride + i) * wp + xo * stride;
                        let wrow = ki * c * kh * kw + ci * kh * kw + i * kw;
                        for j in 0..kw {
                            acc += wd[wrow + j] * pad[row + j];
                        }
                    }
                }
                out[ki * ho * wo + yo * wo + xo] = acc;
            }
        }
    }
    Tensor::new(vec![k, ho, wo], out)
}

/// Gradients of `conv2d_forward` w.r.t. input, kernels and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (gout.shape()[1], gout.shape()[2]);
    let (pad, _, hp, wp) = pad_input(x, padding);
    let mut dpad = vec![T::zero(); c * hp * wp];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); k];
    let wd = w.data();
    let gd = gout.data();
    for ki in 0..k {
        for yo in 0..ho {
            for xo in 0..wo {
                let g = gd[ki * ho * wo + yo * wo + xo];
                db[ki] += g;
                for ci in 0..c {
                    for i in 0..kh {
                        let row = ci * hp * wp + (yo * stride + i) * wp + xo * stride;
                        let wrow = ki * c * kh * kw + ci * kh * kw + i * kw;
                        for j in 0..kw {
                            dw[wrow + j] += g * pad[row + j];
                            dpad[row + j] += g * wd[wrow + j];
                        }
                    }
                }
            }
        }
    }
    // crop the padding off the input gradient
    let mut dx = vec![T::zero(); c * h * ww];
    for ci in 0..c {
        for y in 0..h {
            let src = ci * hp * wp + (y + padding) * wp + padding;
            let dst = ci * h * ww + y * ww;
            dx[dst..dst + ww].copy_from_slice(&dpad[src..src + ww]);
        }
    }
    (
        Tensor::new(vec![c, h, ww], dx).expect("conv2d dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("conv2d dw shape"),
        Tensor::new(vec![k], db).expect("conv2d db shape"),
    )
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gout.data().iter())
        .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu dx shape")
}

/// Window-wise maximum over `[K,H,W]`; also returns the flat index of each
/// window's maximum (first occurrence in row-major scan) for the backward pass.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.shape().len() != 3 {
        return Err(Error::shape("maxpool", format!("want [K,H,W], got {:?}", x.shape())));
    }
    let (k, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if window == 0 {
        return Err(Error::invalid("maxpool", "window must be >= 1"));
    }
    if h % window != 0 {
        return Err(Error::shape("maxpool", format!("height {h} not divisible by window {window}")));
    }
    if w % window != 0 {
        return Err(Error::shape("maxpool", format!("width {w} not divisible by window {window}")));
    }
    let (ho, wo) = (h / window, w / window);
    let mut out = vec![T::zero(); k * ho * wo];
    let mut arg = vec![0usize; k * ho * wo];
    let xd = x.data();
    for ki in 0..k {
        for yo in 0..ho {
            for xo in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for i in 0..window {
                    for j in 0..window {
                        let idx = ki * h * w + (yo * window + i) * w + (xo * window + j);
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[ki * ho * wo + yo * wo + xo] = best;
                arg[ki * ho * wo + yo * wo + xo] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![k, ho, wo], out)?, arg))
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (slot, &g) in argmax.iter().zip(gout.data().iter()) {
        dx[*slot] += g;
    }
    Tensor::new(input_shape.to_vec(), dx).expect("maxpool dx shape")
}

/// Fully connected layer: `y = W x + b` with `x: [d]`, `W: [c,d]`, `b: [c]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if w.shape().len() != 2 {
        return Err(Error::shape("dense", format!("want W [c,d], got {:?}", w.shape())));
    }
    let (c, d) = (w.shape()[0], w.shape()[1]);
    if x.numel() != d {
        return Err(Error::shape("dense", format!("x has {} values, W expects {d}", x.numel())));
    }
    if b.shape() != [c] {
        return Err(Error::shape("dense", format!("bias shape {:?}, want [{c}]", b.shape())));
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = b.data().to_vec();
    for i in 0..c {
        let row = &wd[i * d..(i + 1) * d];
        let mut acc = T::zero();
        for j in 0..d {
            acc += row[j] * xd[j];
        }
        out[i] += acc;
    }
    Tensor::new(vec![c], out)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, d) = (w.shape()[0], w.shape()[1]);
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    let mut dx = vec![T::zero(); d];
    let mut dw = vec![T::zero(); c * d];
    for i in 0..c {
        let g = gd[i];
        for j in 0..d {
            dx[j] += g * wd[i * d + j];
            dw[i * d + j] = g * xd[j];
        }
    }
    (
        Tensor::new(vec![d], dx).expect("dense dx shape"),
        Tensor::new(vec![c, d], dw).expect("dense dw shape"),
        gout.clone(),
    )
}

/// Numerically stable softmax probabilities.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / z).collect()
}

/// `-log softmax(logits)[label]`, computed with max-subtraction.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<T> {
    let n = logits.numel();
    if label >= n {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {label} out of range for {n} classes"),
        ));
    }
    let ld = logits.data();
    let m = ld.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for &l in ld {
        z += (l - m).exp();
    }
    Ok(z.ln() + m - ld[label])
}

/// Gradient of the cross-entropy w.r.t. the logits: `softmax - onehot`.
pub fn softmax_cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, label: usize, gout: T) -> Tensor<T> {
    let mut p = softmax(logits.data());
    p[label] -= T::one();
    for v in &mut p {
        *v *= gout;
    }
    Tensor::new(logits.shape().to_vec(), p).expect("ce dlogits shape")
}

/// Guard below which a vector counts as zero for cosine purposes.
pub const COSINE_EPS: f64 = 1e-12;

/// Cosine similarity of two equal-length vectors; 0 if either norm is tiny.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} vs {}", u.len(), v.len()),
        ));
    }
    let eps = T::from_f64(COSINE_EPS);
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < eps || nv < eps {
        return Ok(T::zero());
    }
    Ok(dot / (nu * nv))
}

/// Gradient of `cosine_similarity(u, v)` w.r.t. `u` (with `v` constant).
pub fn cosine_similarity_backward_u<T: Scalar>(u: &[T], v: &[T], gout: T) -> Vec<T> {
    let eps = T::from_f64(COSINE_EPS);
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < eps || nv < eps {
        return vec![T::zero(); u.len()];
    }
    let c = dot / (nu * nv);
    u.iter()
        .zip(v.iter())
        .map(|(&a, &b)| gout * (b / (nu * nv) - c * a / (nu * nu)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_hand_dot_product() {
        // 1x2x2 input, 1x1x2x2 kernel picking corners: 1*1 + 4*1 = 5
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_map() {
        let x = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_zero_kernel_annihilates() {
        let x = t(&[2, 4, 4], &(0..32).map(|v| v as f64).collect::<Vec<_>>());
        let w = Tensor::zeros(&[3, 2, 2, 2]);
        let b = Tensor::zeros(&[3]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_channel_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1]);
        let err = conv2d_forward(&x, &w, &b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn conv2d_output_shape_formula_sweep() {
        for h in 2..=8usize {
            for w in 2..=8usize {
                for kh in 1..=h.min(3) {
                    for stride in 1..=2usize {
                        for pad in 0..=1usize {
                            let x = Tensor::<f64>::zeros(&[1, h, w]);
                            let ker = Tensor::<f64>::zeros(&[1, 1, kh, kh]);
                            if kh > w + 2 * pad {
                                continue;
                            }
                            let b = Tensor::<f64>::zeros(&[1]);
                            let y = conv2d_forward(&x, &ker, &b, stride, pad).unwrap();
                            assert_eq!(
                                y.shape(),
                                &[
                                    1,
                                    (h + 2 * pad - kh) / stride + 1,
                                    (w + 2 * pad - kh) / stride + 1
                                ]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(&[2], &[-1.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn maxpool_window_maximum() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_rejects_non_divisible_dims() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4]);
        let err = maxpool_forward(&x, 2).unwrap_err();
        assert!(err.to_string().contains("height 3"));
    }

    #[test]
    fn dense_identity_passes_through() {
        let x = t(&[3], &[1.0, -2.0, 3.0]);
        let w = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(&[3]);
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        for c in 2..6usize {
            let logits = Tensor::new(vec![c], vec![0.7f64; c]).unwrap();
            let loss = softmax_cross_entropy(&logits, 0).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_overflow_safe() {
        let logits = t(&[2], &[1000.0, 0.0]);
        let loss = softmax_cross_entropy(&logits, 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_quarter_three_quarter() {
        // softmax([0, ln 3]) = (1/4, 3/4), so the class-0 loss is ln 4
        let logits = t(&[2], &[0.0, 3.0f64.ln()]);
        let loss = softmax_cross_entropy(&logits, 0).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = t(&[2], &[0.0, 1.0]);
        assert!(softmax_cross_entropy(&logits, 2).is_err());
    }

    #[test]
    fn cosine_axis_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_guard() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_dim_mismatch() {
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }
}
