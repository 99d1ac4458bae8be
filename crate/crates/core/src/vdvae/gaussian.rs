//! Diagonal Gaussians parameterized by mean and log standard deviation.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Range every log standard deviation is clamped to.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<T> {
    pub mean: Tensor<T>,
    pub log_std: Tensor<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mean: Tensor<T>, log_std: Tensor<T>) -> Result<Self> {
        if mean.shape() != log_std.shape() {
            return Err(Error::Shape(format!(
                "mean {:?} and log-std {:?} differ",
                mean.shape(),
                log_std.shape()
            )));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(shape: &[usize]) -> Self {
        Self {
            mean: Tensor::zeros(shape),
            log_std: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }
}

/// `KL(N(qm, e^qls) || N(pm, e^pls))` for one element.
pub fn kl_elem<T: Scalar>(qm: T, qls: T, pm: T, pls: T) -> T {
    let var_ratio = (T::lit(2.0) * (qls - pls)).exp();
    let d = (qm - pm) * (-pls).exp();
    pls - qls + T::lit(0.5) * (var_ratio + d * d) - T::lit(0.5)
}

/// Partial derivatives of [`kl_elem`]: `(d/dqm, d/dqls, d/dpm, d/dpls)`.
pub fn kl_elem_grad<T: Scalar>(qm: T, qls: T, pm: T, pls: T) -> [T; 4] {
    let inv_var_p = (T::lit(-2.0) * pls).exp();
    let var_ratio = (T::lit(2.0) * (qls - pls)).exp();
    let diff = qm - pm;
    let d_qm = diff * inv_var_p;
    [
        d_qm,
        var_ratio - T::one(),
        -d_qm,
        T::one() - var_ratio - diff * diff * inv_var_p,
    ]
}

/// Elementwise closed-form KL between two diagonal Gaussians.
pub fn gaussian_kl<T: Scalar>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Result<Tensor<T>> {
    if q.shape() != p.shape() {
        return Err(Error::Shape(format!(
            "posterior {:?} and prior {:?} differ",
            q.shape(),
            p.shape()
        )));
    }
    let data = q
        .mean
        .data()
        .iter()
        .zip(q.log_std.data())
        .zip(p.mean.data().iter().zip(p.log_std.data()))
        .map(|((&qm, &qls), (&pm, &pls))| kl_elem(qm, qls, pm, pls))
        .collect();
    Ok(Tensor::new(q.shape().to_vec(), data))
}

pub fn clamp_log_std<T: Scalar>(v: T) -> T {
    v.max(T::lit(LOG_STD_MIN)).min(T::lit(LOG_STD_MAX))
}
