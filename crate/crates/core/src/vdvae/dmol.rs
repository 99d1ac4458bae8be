//! Mixture of discretized logistics over 8-bit RGB pixels.
//!
//! Pixel values are mapped to `[-1, 1]` with bins of width `2/255`. Each
//! mixture component models R, then G given R, then B given R and G through
//! linear coefficients squashed by `tanh`. The lowest and highest bins are
//! open towards `-inf` and `+inf` respectively.
//!
//! Per-pixel parameter layout, with `M` components (`10 * M` channels):
//!
//! | channels        | content                         |
//! |-----------------|---------------------------------|
//! | `0..M`          | mixture logits                  |
//! | `M..4M`         | means, channel-major (R, G, B)  |
//! | `4M..7M`        | log-scales, channel-major       |
//! | `7M..10M`       | coefficients (g<-r, b<-r, b<-g) |

use rand::Rng;

use crate::kernels::{log_sum_exp, sigmoid, softplus};
use crate::tensor::{Scalar, Tensor};

/// Lower clamp applied to log-scales before evaluating a component.
pub const MIN_LOG_SCALE: f64 = -7.0;

const HALF_BIN: f64 = 1.0 / 255.0;
const EDGE: f64 = 0.999;

pub fn channels_for(components: usize) -> usize {
    10 * components
}

/// Log-probability of the bin containing `x` under one discretized logistic,
/// together with its partial derivatives with respect to `mean` and the
/// (already clamped) `log_scale`.
pub fn log_prob_bin<T: Scalar>(x: T, mean: T, log_scale: T) -> (T, T, T) {
    let inv_s = (-log_scale).exp();
    let c = x - mean;
    let half = T::lit(HALF_BIN);
    let a = inv_s * (c + half);
    let b = inv_s * (c - half);
    if x < T::lit(-EDGE) {
        // log sigma(a)
        let lp = -softplus(-a);
        let s = sigmoid(-a);
        (lp, -s * inv_s, -s * a)
    } else if x > T::lit(EDGE) {
        // log(1 - sigma(b))
        let lp = -softplus(b);
        let s = sigmoid(b);
        (lp, s * inv_s, s * b)
    } else {
        // sigma(a) - sigma(b) = sigma(a) (1 - sigma(b)) (1 - e^{b - a})
        let delta = a - b;
        let lp = -softplus(-a) - softplus(b) + (-(-delta).exp_m1()).ln();
        let sa = sigmoid(-a);
        let sb = sigmoid(b);
        let d_mean = inv_s * (sb - sa);
        let d_ls = -a * sa + b * sb - delta / delta.exp_m1();
        (lp, d_mean, d_ls)
    }
}

/// Gathered parameters of one pixel.
#[derive(Debug, Clone)]
pub struct PixelParams<'a, T> {
    pub components: usize,
    pub values: &'a [T],
}

impl<T: Scalar> PixelParams<'_, T> {
    fn logit(&self, k: usize) -> T {
        self.values[k]
    }
    fn mean(&self, c: usize, k: usize) -> T {
        self.values[self.components * (1 + c) + k]
    }
    fn raw_log_scale(&self, c: usize, k: usize) -> T {
        self.values[self.components * (4 + c) + k]
    }
    fn coeff(&self, i: usize, k: usize) -> T {
        self.values[self.components * (7 + i) + k]
    }

    fn clamped_log_scale(&self, c: usize, k: usize) -> (T, bool) {
        let raw = self.raw_log_scale(c, k);
        let lo = T::lit(MIN_LOG_SCALE);
        if raw < lo {
            (lo, false)
        } else {
            (raw, true)
        }
    }

    /// Log-probability of the RGB value `x` (each in `[-1, 1]`), optionally
    /// accumulating `upstream * d/dparams` into `grad`.
    pub fn log_prob(&self, x: [T; 3], mut grad: Option<(&mut [T], T)>) -> T {
        let m = self.components;
        let mut comp_lp = vec![T::zero(); m];
        let mut parts = vec![[(T::zero(), T::zero()); 3]; m];
        let mut tanh_c = vec![[T::zero(); 3]; m];
        let logits: Vec<T> = (0..m).map(|k| self.logit(k)).collect();
        for k in 0..m {
            let t = [
                self.coeff(0, k).tanh(),
                self.coeff(1, k).tanh(),
                self.coeff(2, k).tanh(),
            ];
            tanh_c[k] = t;
            let means = [
                self.mean(0, k),
                self.mean(1, k) + t[0] * x[0],
                self.mean(2, k) + t[1] * x[0] + t[2] * x[1],
            ];
            let mut total = logits[k];
            for c in 0..3 {
                let (ls, _) = self.clamped_log_scale(c, k);
                let (lp, dm, dls) = log_prob_bin(x[c], means[c], ls);
                parts[k][c] = (dm, dls);
                total += lp;
            }
            comp_lp[k] = total;
        }
        let lse = log_sum_exp(&comp_lp);
        let lse_logits = log_sum_exp(&logits);
        let value = lse - lse_logits;

        if let Some((g, up)) = grad.as_mut() {
            let up = *up;
            for k in 0..m {
                let w = (comp_lp[k] - lse).exp();
                let pi = (logits[k] - lse_logits).exp();
                g[k] += up * (w - pi);
                let gw = up * w;
                for c in 0..3 {
                    let (dm, dls) = parts[k][c];
                    g[m * (1 + c) + k] += gw * dm;
                    let (_, live) = self.clamped_log_scale(c, k);
                    if live {
                        g[m * (4 + c) + k] += gw * dls;
                    }
                }
                let (dm_g, dm_b) = (parts[k][1].0, parts[k][2].0);
                let t = tanh_c[k];
                g[m * 7 + k] += gw * dm_g * (T::one() - t[0] * t[0]) * x[0];
                g[m * 8 + k] += gw * dm_b * (T::one() - t[1] * t[1]) * x[0];
                g[m * 9 + k] += gw * dm_b * (T::one() - t[2] * t[2]) * x[1];
            }
        }
        value
    }

    /// Mixture mean in normalized space, computed channel by channel so that
    /// the G and B conditionals see the decoded R and G values.
    pub fn mean_value(&self) -> [T; 3] {
        let m = self.components;
        let logits: Vec<T> = (0..m).map(|k| self.logit(k)).collect();
        let lse = log_sum_exp(&logits);
        let pis: Vec<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
        let clip = |v: T| v.max(-T::one()).min(T::one());
        let r = clip((0..m).map(|k| pis[k] * self.mean(0, k)).sum());
        let g = clip(
            (0..m)
                .map(|k| pis[k] * (self.mean(1, k) + self.coeff(0, k).tanh() * r))
                .sum(),
        );
        let b = clip(
            (0..m)
                .map(|k| {
                    pis[k]
                        * (self.mean(2, k)
                            + self.coeff(1, k).tanh() * r
                            + self.coeff(2, k).tanh() * g)
                })
                .sum(),
        );
        [r, g, b]
    }

    /// Draw a value: pick a component via Gumbel-max, then sample the three
    /// logistics autoregressively.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [T; 3] {
        let m = self.components;
        let mut best = (T::neg_infinity(), 0);
        for k in 0..m {
            let u: f64 = rng.random_range(1e-5..1.0 - 1e-5);
            let score = self.logit(k) - T::lit(-(u.ln()).ln());
            if score > best.0 {
                best = (score, k);
            }
        }
        let k = best.1;
        let mut logistic = |c: usize| {
            let u: f64 = rng.random_range(1e-5..1.0 - 1e-5);
            let (ls, _) = self.clamped_log_scale(c, k);
            ls.exp() * T::lit(u.ln() - (1.0 - u).ln())
        };
        let clip = |v: T| v.max(-T::one()).min(T::one());
        let r = clip(self.mean(0, k) + logistic(0));
        let g = clip(self.mean(1, k) + self.coeff(0, k).tanh() * r + logistic(1));
        let b = clip(
            self.mean(2, k) + self.coeff(1, k).tanh() * r + self.coeff(2, k).tanh() * g + logistic(2),
        );
        [r, g, b]
    }
}

fn gather<T: Scalar>(params: &Tensor<T>, b: usize, pos: usize, buf: &mut [T]) {
    let (_, ch, h, w) = params.dims4();
    let hw = h * w;
    let base = b * ch * hw + pos;
    for (c, v) in buf.iter_mut().enumerate() {
        *v = params.data()[base + c * hw];
    }
}

/// Summed log-likelihood of normalized images `x` (`[N, 3, H, W]`, values on
/// the 256-level grid in `[-1, 1]`) under decoder output `params`
/// (`[N, 10M, H, W]`).
pub fn log_likelihood<T: Scalar>(params: &Tensor<T>, x: &Tensor<T>, components: usize) -> T {
    let (n, ch, h, w) = params.dims4();
    assert_eq!(ch, channels_for(components), "decoder channels do not match mixture size");
    assert_eq!(x.shape(), &[n, 3, h, w], "image shape does not match decoder output");
    let hw = h * w;
    let mut buf = vec![T::zero(); ch];
    let mut total = T::zero();
    for b in 0..n {
        for pos in 0..hw {
            gather(params, b, pos, &mut buf);
            let xv = pixel_of(x, b, pos);
            total += PixelParams { components, values: &buf }.log_prob(xv, None);
        }
    }
    total
}

/// Gradient of `upstream * log_likelihood` with respect to `params`.
pub fn log_likelihood_grad<T: Scalar>(
    params: &Tensor<T>,
    x: &Tensor<T>,
    components: usize,
    upstream: T,
) -> Tensor<T> {
    let (n, ch, h, w) = params.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(params.shape());
    let mut buf = vec![T::zero(); ch];
    let mut gbuf = vec![T::zero(); ch];
    for b in 0..n {
        for pos in 0..hw {
            gather(params, b, pos, &mut buf);
            gbuf.fill(T::zero());
            let xv = pixel_of(x, b, pos);
            PixelParams { components, values: &buf }.log_prob(xv, Some((&mut gbuf, upstream)));
            let base = b * ch * hw + pos;
            for (c, g) in gbuf.iter().enumerate() {
                out.data_mut()[base + c * hw] = *g;
            }
        }
    }
    out
}

fn pixel_of<T: Scalar>(x: &Tensor<T>, b: usize, pos: usize) -> [T; 3] {
    let (_, _, h, w) = x.dims4();
    let hw = h * w;
    let base = b * 3 * hw + pos;
    [x.data()[base], x.data()[base + hw], x.data()[base + 2 * hw]]
}

/// How decoder output is turned into an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Per-pixel mixture mean.
    #[default]
    Mean,
    /// One draw from the observation model.
    Sample,
}

/// Decode `[N, 10M, H, W]` parameters into a normalized `[N, 3, H, W]` image.
pub fn decode<T: Scalar, R: Rng + ?Sized>(
    params: &Tensor<T>,
    components: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Tensor<T> {
    let (n, ch, h, w) = params.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, 3, h, w]);
    let mut buf = vec![T::zero(); ch];
    for b in 0..n {
        for pos in 0..hw {
            gather(params, b, pos, &mut buf);
            let px = PixelParams { components, values: &buf };
            let v = match mode {
                DecodeMode::Mean => px.mean_value(),
                DecodeMode::Sample => px.sample(rng),
            };
            for (c, val) in v.iter().enumerate() {
                out.data_mut()[b * 3 * hw + c * hw + pos] = *val;
            }
        }
    }
    out
}
