//! Forward and backward kernels for the dense NCHW operations used by the tape.

use crate::tensor::{Scalar, Tensor};

/// Unfold a single `[C, H, W]` image into `[C*k*k, H*W]` columns for a
/// stride-1 convolution with zero padding `k / 2`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut out[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into a `[C, H, W]` gradient buffer.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + dxo;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `weight` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, k, k2) = weight.dims4();
    assert_eq!(cin, wcin, "conv input channels {cin} != weight channels {wcin}");
    assert_eq!(k, k2);
    assert!(k % 2 == 1, "only odd kernels are supported");
    assert_eq!(bias.len(), cout);
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = vec![T::zero(); n * cout * hw];
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for b in 0..n {
        let xin = &x.data()[b * cin * hw..(b + 1) * cin * hw];
        let dst = &mut out[b * cout * hw..(b + 1) * cout * hw];
        for (co, chunk) in dst.chunks_mut(hw).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let src: &[T] = if k == 1 {
            xin
        } else {
            im2col(xin, cin, h, w, k, &mut cols);
            &cols
        };
        T::gemm(
            cout,
            kk,
            hw,
            T::one(),
            weight.data(),
            kk as isize,
            1,
            src,
            hw as isize,
            1,
            T::one(),
            dst,
            hw as isize,
            1,
        );
    }
    Tensor::new(vec![n, cout, h, w], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, cin, h, w) = x.dims4();
    let (cout, _, k, _) = weight.dims4();
    let hw = h * w;
    let kk = cin * k * k;
    let mut dx = vec![T::zero(); n * cin * hw];
    let mut dw = vec![T::zero(); cout * kk];
    let mut db = vec![T::zero(); cout];
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for b in 0..n {
        let xin = &x.data()[b * cin * hw..(b + 1) * cin * hw];
        let g = &grad_out.data()[b * cout * hw..(b + 1) * cout * hw];
        for (co, chunk) in g.chunks(hw).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let src: &[T] = if k == 1 {
            xin
        } else {
            im2col(xin, cin, h, w, k, &mut cols);
            &cols
        };
        // dW[cout, kk] += g[cout, hw] * src^T[hw, kk]
        T::gemm(
            cout,
            hw,
            kk,
            T::one(),
            g,
            hw as isize,
            1,
            src,
            1,
            hw as isize,
            T::one(),
            &mut dw,
            kk as isize,
            1,
        );
        let dxb = &mut dx[b * cin * hw..(b + 1) * cin * hw];
        if k == 1 {
            // dX[cin, hw] = W^T[cin, cout] * g[cout, hw]
            T::gemm(
                cin,
                cout,
                hw,
                T::one(),
                weight.data(),
                1,
                kk as isize,
                g,
                hw as isize,
                1,
                T::one(),
                dxb,
                hw as isize,
                1,
            );
        } else {
            T::gemm(
                kk,
                cout,
                hw,
                T::one(),
                weight.data(),
                1,
                kk as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                &mut dcols,
                hw as isize,
                1,
            );
            col2im(&dcols, cin, h, w, k, dxb);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(weight.shape().to_vec(), dw),
        Tensor::new(vec![cout], db),
    )
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Average pooling over non-overlapping `factor x factor` windows.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(h % factor == 0 && w % factor == 0, "pool factor must divide size");
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::one() / T::from_usize(factor * factor).unwrap();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..factor {
                    let row = &src[(oy * factor + dy) * w + ox * factor..];
                    for v in &row[..factor] {
                        acc += *v;
                    }
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, oh, ow) = grad_out.dims4();
    let (h, w) = (oh * factor, ow * factor);
    let norm = T::one() / T::from_usize(factor * factor).unwrap();
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / factor) * ow + x / factor] * norm;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                dst[y * ow + xo] = src[(y / factor) * w + xo / factor];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, oh, ow) = grad_out.dims4();
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                dst[(y / factor) * w + xo / factor] += g[y * ow + xo];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// Channel concatenation of two NCHW tensors with equal N, H, W.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// Channels `[start, end)` of an NCHW tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(start < end && end <= c, "channel slice {start}..{end} of {c}");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (end - start) * hw);
    for i in 0..n {
        out.extend_from_slice(&x.data()[(i * c + start) * hw..(i * c + end) * hw]);
    }
    Tensor::new(vec![n, end - start, h, w], out)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4();
        let (cout, _, k, _) = wt.dims4();
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, cout, h, w]);
        for bi in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xo in 0..w {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xo as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wt.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()
                                            [((bi * cin + ci) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + co) * h + y) * w + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect(),
        )
    }

    #[test]
    fn conv_matches_direct_sum() {
        for k in [1, 3] {
            let x = ramp(&[2, 3, 5, 4], 0.1);
            let wt = ramp(&[4, 3, k, k], 0.03);
            let b = ramp(&[4], 0.2);
            let got = conv2d(&x, &wt, &b);
            let want = naive_conv(&x, &wt, &b);
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w; check gradients against that identity.
        for k in [1, 3] {
            let x = ramp(&[2, 3, 4, 5], 0.1);
            let wt = ramp(&[2, 3, k, k], 0.07);
            let b = Tensor::zeros(&[2]);
            let g = ramp(&[2, 2, 4, 5], 0.05);
            let (dx, dw, db) = conv2d_backward(&x, &wt, &g);
            let y = conv2d(&x, &wt, &b);
            let inner: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
            assert!((inner - via_x).abs() < 1e-10);
            assert!((inner - via_w).abs() < 1e-10);
            let gsum: f64 = g.data()[..20].iter().sum::<f64>() + g.data()[40..60].iter().sum::<f64>();
            assert!((db.data()[0] - gsum).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = ramp(&[1, 2, 4, 4], 1.0);
        let g = ramp(&[1, 2, 2, 2], 0.5);
        let lhs: f64 = avg_pool(&x, 2).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool_backward(&g, 2)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let up = upsample_nearest(&g, 2);
        assert_eq!(up.shape(), &[1, 2, 4, 4]);
        let lhs: f64 = up.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample_nearest_backward(&x, 2)
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for i in -40..40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((log_sum_exp(&[0.0f64, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
