//! Layer kernels: valid (no-padding) 2D convolution, ReLU, dense layers,
//! flatten and feature concatenation, each with its reverse-mode companion.
//!
//! Convolutions lower to im2col plus a small matmul; the inner loops run
//! over contiguous slices so they vectorize.

// conv plumbing passes dims positionally and returns (dx, dw, db) triples
#![allow(clippy::too_many_arguments, clippy::type_complexity)]

use super::{shape_err, NnError, Scalar, Tensor};

/// Output spatial size of a valid convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// C[M,P] += A[M,K] x B[K,P]
fn matmul_acc<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, p: usize) {
    debug_assert_eq!(c.len(), m * p);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    for mi in 0..m {
        let crow = &mut c[mi * p..(mi + 1) * p];
        for ki in 0..k {
            let av = a[mi * k + ki];
            let brow = &b[ki * p..(ki + 1) * p];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

/// Lane-split dot product: independent accumulator lanes vectorize, and
/// the final reduction order is fixed, so results are reproducible.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 16;
    let n = a.len().min(b.len());
    let mut acc = [S::ZERO; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        let aa = &a[base..base + LANES];
        let bb = &b[base..base + LANES];
        for j in 0..LANES {
            acc[j] += aa[j] * bb[j];
        }
    }
    let mut total = S::ZERO;
    for lane in acc {
        total += lane;
    }
    for i in chunks * LANES..n {
        total += a[i] * b[i];
    }
    total
}

/// Unfold [C,H,W] into columns [C*KH*KW, OH*OW].
/// Every slot of `cols` is written, so a reused buffer needs no zeroing.
fn im2col_into<S: Scalar>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    cols: &mut Vec<S>,
) {
    let oh = conv_output_size(h, kh, sh);
    let ow = conv_output_size(w, kw, sw);
    let p = oh * ow;
    cols.resize(c * kh * kw * p, S::ZERO);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = oy * sh + ky;
                    let src = (ci * h + iy) * w + kx;
                    let dst = row + oy * ow;
                    if sw == 1 {
                        cols[dst..dst + ow].copy_from_slice(&input[src..src + ow]);
                    } else {
                        let srow = &input[src..src + (ow - 1) * sw + 1];
                        for (cv, iv) in
                            cols[dst..dst + ow].iter_mut().zip(srow.iter().step_by(sw))
                        {
                            *cv = *iv;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns [C*KH*KW, OH*OW] back onto a [C,H,W] gradient.
fn col2im_acc<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    out: &mut [S],
) {
    let oh = conv_output_size(h, kh, sh);
    let ow = conv_output_size(w, kw, sw);
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = oy * sh + ky;
                    let dst = (ci * h + iy) * w + kx;
                    let src = row + oy * ow;
                    let srow = &cols[src..src + ow];
                    if sw == 1 {
                        for (ov, cv) in out[dst..dst + ow].iter_mut().zip(srow) {
                            *ov += *cv;
                        }
                    } else {
                        let orow = &mut out[dst..dst + (ow - 1) * sw + 1];
                        for (ov, cv) in orow.iter_mut().step_by(sw).zip(srow) {
                            *ov += *cv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_shapes<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    stride: (usize, usize),
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize), NnError> {
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(shape_err("conv2d", format!("input must be [C,H,W], got {s:?}"))),
    };
    let (oc, wc, kh, kw) = match weights.shape() {
        [oc, wc, kh, kw] => (*oc, *wc, *kh, *kw),
        s => return Err(shape_err("conv2d", format!("weights must be [OC,C,KH,KW], got {s:?}"))),
    };
    if wc != c {
        return Err(shape_err("conv2d", format!("weight channels {wc} != input channels {c}")));
    }
    if bias.shape() != [oc] {
        return Err(shape_err("conv2d", format!("bias must be [{oc}], got {:?}", bias.shape())));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(shape_err("conv2d", "stride must be positive"));
    }
    if kh > h || kw > w {
        return Err(shape_err("conv2d", format!("kernel {kh}x{kw} exceeds input {h}x{w}")));
    }
    let oh = conv_output_size(h, kh, stride.0);
    let ow = conv_output_size(w, kw, stride.1);
    Ok((c, h, w, oc, kh, kw, oh, ow))
}

/// Valid 2D convolution: input [C,H,W], weights [OC,C,KH,KW], bias [OC]
/// with the output [OC, (H-KH)/sh+1, (W-KW)/sw+1].
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    stride: (usize, usize),
) -> Result<Tensor<S>, NnError> {
    conv2d_forward_with(input, weights, bias, stride, &mut Vec::new())
}

/// [`conv2d_forward`] with a caller-owned im2col buffer, for hot loops
/// that run many convolutions back to back.
pub(crate) fn conv2d_forward_with<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    stride: (usize, usize),
    cols: &mut Vec<S>,
) -> Result<Tensor<S>, NnError> {
    let (c, h, w, oc, kh, kw, oh, ow) = conv_shapes(input, weights, bias, stride)?;
    let p = oh * ow;
    let k = c * kh * kw;
    im2col_into(input.data(), c, h, w, kh, kw, stride.0, stride.1, cols);
    let mut out = vec![S::ZERO; oc * p];
    matmul_acc(&mut out, weights.data(), cols, oc, k, p);
    for oci in 0..oc {
        let b = bias.data()[oci];
        for v in &mut out[oci * p..(oci + 1) * p] {
            *v += b;
        }
    }
    Tensor::from_vec(&[oc, oh, ow], out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weights and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    stride: (usize, usize),
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), NnError> {
    conv2d_backward_with(input, weights, stride, grad_out, &mut Vec::new(), &mut Vec::new())
}

/// [`conv2d_backward`] with caller-owned column buffers.
pub(crate) fn conv2d_backward_with<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    stride: (usize, usize),
    grad_out: &Tensor<S>,
    cols: &mut Vec<S>,
    dcols: &mut Vec<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), NnError> {
    let bias_probe = Tensor::zeros(&[weights.shape()[0]]);
    let (c, h, w, oc, kh, kw, oh, ow) = conv_shapes(input, weights, &bias_probe, stride)?;
    if grad_out.shape() != [oc, oh, ow] {
        return Err(shape_err(
            "conv2d_backward",
            format!("grad_out must be [{oc},{oh},{ow}], got {:?}", grad_out.shape()),
        ));
    }
    let p = oh * ow;
    let k = c * kh * kw;
    im2col_into(input.data(), c, h, w, kh, kw, stride.0, stride.1, cols);
    let dy = grad_out.data();

    // db[oc] = sum_p dy[oc][p]
    let mut db = vec![S::ZERO; oc];
    for oci in 0..oc {
        let mut acc = S::ZERO;
        for v in &dy[oci * p..(oci + 1) * p] {
            acc += *v;
        }
        db[oci] = acc;
    }

    // dW[oc][k] = dot(dy[oc], cols[k])
    let mut dw = vec![S::ZERO; oc * k];
    for oci in 0..oc {
        let dyrow = &dy[oci * p..(oci + 1) * p];
        for ki in 0..k {
            dw[oci * k + ki] = dot(dyrow, &cols[ki * p..(ki + 1) * p]);
        }
    }

    // dcols[k] = sum_oc w[oc][k] * dy[oc], then scatter back to the input;
    // k-outer keeps each dcols row hot while streaming the dy rows
    dcols.clear();
    dcols.resize(k * p, S::ZERO);
    let wdat = weights.data();
    for ki in 0..k {
        let drow = &mut dcols[ki * p..(ki + 1) * p];
        for oci in 0..oc {
            let wv = wdat[oci * k + ki];
            let dyrow = &dy[oci * p..(oci + 1) * p];
            for (dv, yv) in drow.iter_mut().zip(dyrow) {
                *dv += wv * *yv;
            }
        }
    }
    let mut dx = vec![S::ZERO; c * h * w];
    col2im_acc(dcols, c, h, w, kh, kw, stride.0, stride.1, &mut dx);

    Ok((
        Tensor::from_vec(&[c, h, w], dx)?,
        Tensor::from_vec(weights.shape(), dw)?,
        Tensor::from_vec(&[oc], db)?,
    ))
}

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let data = input.data().iter().map(|&v| if v > S::ZERO { v } else { S::ZERO }).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub fn relu_backward<S: Scalar>(
    input: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>, NnError> {
    if input.shape() != grad_out.shape() {
        return Err(shape_err(
            "relu_backward",
            format!("input {:?} vs grad {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > S::ZERO { g } else { S::ZERO })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn linear_shapes<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    out_dim_hint: Option<usize>,
) -> Result<(usize, usize, usize), NnError> {
    let (n, fin) = match x.shape() {
        [n, fin] => (*n, *fin),
        [fin] => (1, *fin),
        s => return Err(shape_err("linear", format!("input must be [N,IN] or [IN], got {s:?}"))),
    };
    let (fout, win) = match w.shape() {
        [fout, win] => (*fout, *win),
        s => return Err(shape_err("linear", format!("weights must be [OUT,IN], got {s:?}"))),
    };
    if win != fin {
        return Err(shape_err("linear", format!("weight input dim {win} != input dim {fin}")));
    }
    if let Some(hint) = out_dim_hint {
        if hint != fout {
            return Err(shape_err("linear", format!("bias dim {hint} != output dim {fout}")));
        }
    }
    Ok((n, fin, fout))
}

/// Dense layer y = x W^T + b with x [N,IN] (or [IN]), W [OUT,IN], b [OUT].
pub fn linear_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>, NnError> {
    let (n, fin, fout) = linear_shapes(x, w, Some(b.numel()))?;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![S::ZERO; n * fout];
    for ni in 0..n {
        let xrow = &xd[ni * fin..(ni + 1) * fin];
        let orow = &mut out[ni * fout..(ni + 1) * fout];
        for oi in 0..fout {
            orow[oi] = dot(xrow, &wd[oi * fin..(oi + 1) * fin]) + bd[oi];
        }
    }
    if x.shape().len() == 1 {
        Tensor::from_vec(&[fout], out)
    } else {
        Tensor::from_vec(&[n, fout], out)
    }
}

/// Gradients of [`linear_forward`] w.r.t. input, weights and bias.
pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), NnError> {
    let (n, fin, fout) = linear_shapes(x, w, None)?;
    let expect: &[usize] = if x.shape().len() == 1 { &[fout] } else { &[n, fout] };
    if grad_out.shape() != expect {
        return Err(shape_err(
            "linear_backward",
            format!("grad_out must be {expect:?}, got {:?}", grad_out.shape()),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let mut dx = vec![S::ZERO; n * fin];
    let mut dw = vec![S::ZERO; fout * fin];
    let mut db = vec![S::ZERO; fout];

    // dX[n] = sum_o g[n][o] * W[o]; each dx row stays hot across o
    let dx_pass = |dx: &mut [S]| {
        for ni in 0..n {
            let grow = &gd[ni * fout..(ni + 1) * fout];
            let dxrow = &mut dx[ni * fin..(ni + 1) * fin];
            for oi in 0..fout {
                let g = grow[oi];
                let wrow = &wd[oi * fin..(oi + 1) * fin];
                for (dv, wv) in dxrow.iter_mut().zip(wrow) {
                    *dv += g * *wv;
                }
            }
        }
    };
    // dW[o] = sum_n g[n][o] * x[n]; each dw row stays hot across n
    let dw_pass = |dw: &mut [S], db: &mut [S]| {
        for oi in 0..fout {
            let dwrow = &mut dw[oi * fin..(oi + 1) * fin];
            let mut acc = S::ZERO;
            for ni in 0..n {
                let g = gd[ni * fout + oi];
                acc += g;
                let xrow = &xd[ni * fin..(ni + 1) * fin];
                for (dv, xv) in dwrow.iter_mut().zip(xrow) {
                    *dv += g * *xv;
                }
            }
            db[oi] = acc;
        }
    };
    // the passes write disjoint outputs; run them on two threads when the
    // layer is big enough to pay for the spawns
    if n * fin * fout >= 1 << 21 {
        std::thread::scope(|s| {
            let h = s.spawn(|| dx_pass(&mut dx));
            dw_pass(&mut dw, &mut db);
            h.join().expect("dx pass panicked");
        });
    } else {
        dx_pass(&mut dx);
        dw_pass(&mut dw, &mut db);
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
        Tensor::from_vec(&[fout], db)?,
    ))
}

/// View a [N, ...] tensor as [N, F]; the backward pass is the inverse view.
pub fn flatten_batch<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(shape_err("flatten", "input must have at least one axis"));
    }
    let n = shape[0];
    let f: usize = shape[1..].iter().product();
    x.clone().reshaped(&[n, f])
}

/// Concatenate along the feature axis: [N,A] ++ [N,B] -> [N,A+B].
pub fn concat<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NnError> {
    let (na, fa) = match a.shape() {
        [n, f] => (*n, *f),
        s => return Err(shape_err("concat", format!("lhs must be [N,F], got {s:?}"))),
    };
    let (nb, fb) = match b.shape() {
        [n, f] => (*n, *f),
        s => return Err(shape_err("concat", format!("rhs must be [N,F], got {s:?}"))),
    };
    if na != nb {
        return Err(shape_err("concat", format!("batch sizes differ: {na} vs {nb}")));
    }
    let mut out = Vec::with_capacity(na * (fa + fb));
    for ni in 0..na {
        out.extend_from_slice(&a.data()[ni * fa..(ni + 1) * fa]);
        out.extend_from_slice(&b.data()[ni * fb..(ni + 1) * fb]);
    }
    Tensor::from_vec(&[na, fa + fb], out)
}

/// Split a concat gradient back into its two operands.
pub fn concat_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    a_width: usize,
) -> Result<(Tensor<S>, Tensor<S>), NnError> {
    let (n, f) = match grad_out.shape() {
        [n, f] => (*n, *f),
        s => return Err(shape_err("concat_backward", format!("grad must be [N,F], got {s:?}"))),
    };
    if a_width > f {
        return Err(shape_err("concat_backward", format!("lhs width {a_width} > total {f}")));
    }
    let b_width = f - a_width;
    let mut ga = Vec::with_capacity(n * a_width);
    let mut gb = Vec::with_capacity(n * b_width);
    for ni in 0..n {
        let row = &grad_out.data()[ni * f..(ni + 1) * f];
        ga.extend_from_slice(&row[..a_width]);
        gb.extend_from_slice(&row[a_width..]);
    }
    Ok((Tensor::from_vec(&[n, a_width], ga)?, Tensor::from_vec(&[n, b_width], gb)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Six nested loops, no lowering. The reference the fast path is
    /// checked against.
    fn conv_naive(
        input: &Tensor<f64>,
        weights: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: (usize, usize),
    ) -> Tensor<f64> {
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (oc, kh, kw) = (weights.shape()[0], weights.shape()[2], weights.shape()[3]);
        let oh = conv_output_size(h, kh, stride.0);
        let ow = conv_output_size(w, kw, stride.1);
        let mut out = vec![0.0; oc * oh * ow];
        for oci in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oci];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iv =
                                    input.data()[(ci * h + oy * stride.0 + ky) * w
                                        + ox * stride.1
                                        + kx];
                                let wv =
                                    weights.data()[((oci * c + ci) * kh + ky) * kw + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[(oci * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::from_vec(&[oc, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_output_spatial_sizes() {
        assert_eq!(conv_output_size(32, 6, 2), 14);
        assert_eq!(conv_output_size(14, 3, 1), 12);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = StdRng::seed_from_u64(11);
        for &(c, h, w, oc, kh, kw, sh, sw) in &[
            (2usize, 32usize, 32usize, 16usize, 6usize, 6usize, 2usize, 2usize),
            (16, 14, 14, 8, 3, 3, 1, 1),
            (3, 9, 7, 4, 2, 3, 2, 1),
        ] {
            let x = rand_tensor(&mut rng, &[c, h, w]);
            let wt = rand_tensor(&mut rng, &[oc, c, kh, kw]);
            let b = rand_tensor(&mut rng, &[oc]);
            let fast = conv2d_forward(&x, &wt, &b, (sh, sw)).unwrap();
            let slow = conv_naive(&x, &wt, &b, (sh, sw));
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let mut rng = StdRng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[1, 5, 5]);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, (1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_shape_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 8, 8]);
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]); // wrong input channels
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(conv2d_forward(&x, &w, &b, (1, 1)).is_err());
        let w = Tensor::<f64>::zeros(&[4, 2, 9, 3]); // kernel taller than input
        assert!(conv2d_forward(&x, &w, &b, (1, 1)).is_err());
    }

    #[test]
    fn conv_backward_zero_upstream_is_zero() {
        let mut rng = StdRng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, &[2, 8, 8]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let dy = Tensor::zeros(&[3, 6, 6]);
        let (dx, dw, db) = conv2d_backward(&x, &w, (1, 1), &dy).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_linear_in_upstream() {
        let mut rng = StdRng::seed_from_u64(14);
        let x = rand_tensor(&mut rng, &[2, 8, 8]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let dy = rand_tensor(&mut rng, &[3, 6, 6]);
        let dy2 = Tensor::from_vec(dy.shape(), dy.data().iter().map(|v| 2.0 * v).collect())
            .unwrap();
        let (dx1, dw1, _) = conv2d_backward(&x, &w, (1, 1), &dy).unwrap();
        let (dx2, dw2, _) = conv2d_backward(&x, &w, (1, 1), &dy2).unwrap();
        for (a, b) in dx1.data().iter().zip(dx2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in dw1.data().iter().zip(dw2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_basics() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let dx = relu_backward(&x, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_identity_weights() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let b = Tensor::from_vec(&[3], vec![0.5, 0.5, 0.5]).unwrap();
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn flatten_keeps_batch_axis() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let f = flatten_batch(&x).unwrap();
        assert_eq!(f.shape(), &[2, 6]);
        assert_eq!(f.data(), x.data());
        let back = f.reshaped(&[2, 2, 3]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (ga, gb) = concat_backward(&c, 2).unwrap();
        assert_eq!(ga.data(), a.data());
        assert_eq!(gb.data(), b.data());
    }

    #[test]
    fn finite_difference_agreement_all_layers() {
        // Central differences on scalar loss L = sum(layer(x)) for each
        // layer kind, perturbing inputs and parameters.
        let mut rng = StdRng::seed_from_u64(21);
        let h = 1e-5;

        // conv2d
        let x = rand_tensor(&mut rng, &[2, 6, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let stride = (1, 1);
        let ones = {
            let y = conv2d_forward(&x, &w, &b, stride).unwrap();
            Tensor::from_vec(y.shape(), vec![1.0; y.numel()]).unwrap()
        };
        let (dx, dw, db) = conv2d_backward(&x, &w, stride, &ones).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv2d_forward(x, w, b, stride).unwrap().data().iter().sum()
        };
        for i in (0..x.numel()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            let ana = dx.data()[i];
            assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6) < 1e-5);
        }
        for i in (0..w.numel()).step_by(5) {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            let ana = dw.data()[i];
            assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6) < 1e-5);
        }
        for i in 0..b.numel() {
            let mut bp = b.clone();
            bp.data_mut()[i] += h;
            let mut bm = b.clone();
            bm.data_mut()[i] -= h;
            let num = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((num - db.data()[i]).abs() < 1e-6);
        }

        // linear
        let x = rand_tensor(&mut rng, &[4, 5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let b = rand_tensor(&mut rng, &[3]);
        let ones = Tensor::from_vec(&[4, 3], vec![1.0; 12]).unwrap();
        let (dx, dw, db) = linear_backward(&x, &w, &ones).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            linear_forward(x, w, b).unwrap().data().iter().sum()
        };
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() / num.abs().max(1e-6) < 1e-5);
        }
        for i in 0..w.numel() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((num - dw.data()[i]).abs() / num.abs().max(1e-6) < 1e-5);
        }
        for i in 0..b.numel() {
            let num = {
                let mut bp = b.clone();
                bp.data_mut()[i] += h;
                let mut bm = b.clone();
                bm.data_mut()[i] -= h;
                (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h)
            };
            assert!((num - db.data()[i]).abs() < 1e-6);
        }
    }
}
