//! Bottleneck residual blocks shared by every network in the model.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// How the last convolution of a block is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LastInit {
    /// Default fan-in initialization multiplied by the factor.
    Scaled(f64),
    Zero,
}

/// Pre-activation bottleneck: four GELU -> conv stages, 1x1 / 3x3 / 3x3 / 1x1.
#[derive(Debug, Clone, Copy)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    /// 3x3 middle convolutions; disabled at tiny resolutions.
    pub use_3x3: bool,
    pub residual: bool,
    pub last_init: LastInit,
}

impl BlockSpec {
    fn stages(&self) -> [(usize, usize, usize); 4] {
        let k = if self.use_3x3 { 3 } else { 1 };
        [
            (self.in_channels, self.mid_channels, 1),
            (self.mid_channels, self.mid_channels, k),
            (self.mid_channels, self.mid_channels, k),
            (self.mid_channels, self.out_channels, 1),
        ]
    }
}

/// Uniform `±1/sqrt(fan_in)` weights scaled by `scale`, zero bias.
pub fn register_conv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    scale: f64,
) {
    let fan_in = (cin * k * k) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let n = cout * cin * k * k;
    let data: Vec<T> = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound) * scale))
        .collect();
    store.insert(format!("{prefix}.weight"), Tensor::new(vec![cout, cin, k, k], data));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
}

pub fn register_block<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    spec: &BlockSpec,
) {
    for (i, (cin, cout, k)) in spec.stages().into_iter().enumerate() {
        let scale = match (i, spec.last_init) {
            (3, LastInit::Scaled(s)) => s,
            (3, LastInit::Zero) => 0.0,
            _ => 1.0,
        };
        register_conv(store, rng, &format!("{prefix}.c{}", i + 1), cin, cout, k, scale);
    }
}

pub fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    Ok(tape.conv2d(x, w, b))
}

pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    prefix: &str,
    residual: bool,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for i in 1..=4 {
        let a = tape.gelu(h);
        h = conv(tape, params, &format!("{prefix}.c{i}"), a)?;
    }
    Ok(if residual { tape.add(x, h) } else { h })
}

/// 3x3 convolutions are only used above 2x2, where padding does not dominate.
pub fn use_3x3(resolution: usize) -> bool {
    resolution > 2
}
