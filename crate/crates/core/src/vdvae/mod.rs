//! The unconditional hierarchical VAE.
//!
//! A bottom-up residual encoder summarizes the image at every resolution of
//! the latent hierarchy. The top-down decoder then walks the stochastic layers
//! from the coarsest (layer 0) to the finest. Each layer computes its prior
//! from the running decoder state `h_j`, its posterior from `h_j` and the
//! encoder features, samples `z_j`, and folds `z_j` back into the state.
//! The final state parameterizes a mixture of discretized logistics.

pub mod blocks;
pub mod config;
pub mod dmol;
pub mod gaussian;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use config::ModelConfig;
pub use dmol::DecodeMode;
pub use gaussian::{gaussian_kl, GaussianParams};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{denormalize, RgbImage};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use blocks::{block_forward, conv, register_block, register_conv, use_3x3, BlockSpec, LastInit};

/// Standard-normal tensor drawn in row-major order.
pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Bottom-up features, one per encoder resolution.
#[derive(Debug, Clone)]
pub struct EncoderActivations {
    by_resolution: BTreeMap<usize, Var>,
    layer_resolutions: Vec<usize>,
}

impl EncoderActivations {
    /// Feature map consumed by the posterior of layer `j`.
    pub fn for_layer(&self, j: usize) -> Var {
        self.by_resolution[&self.layer_resolutions[j]]
    }

    pub fn at_resolution(&self, res: usize) -> Option<Var> {
        self.by_resolution.get(&res).copied()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_resolutions.len()
    }
}

/// What one top-down block consumes.
#[derive(Debug, Clone, Copy)]
pub struct LayerInputs {
    /// Input of the prior network and of the residual state path.
    pub state: Var,
    /// Decoder-side input of the posterior network (concatenated with the
    /// encoder features).
    pub posterior_in: Var,
    /// Replaces the learned prior head (the fixed or conditional top prior).
    pub prior_override: Option<(Var, Var)>,
}

/// Supplies per-layer block inputs given the decoder state `h_j`.
pub trait Conditioning<T: Scalar> {
    fn layer_inputs(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        layer: usize,
        h: Var,
    ) -> Result<LayerInputs>;
}

/// The plain VAE: `h_j` feeds everything and `p(z_0) = N(0, I)`.
pub struct Unconditioned<'a> {
    pub config: &'a ModelConfig,
    pub batch: usize,
}

impl<T: Scalar> Conditioning<T> for Unconditioned<'_> {
    fn layer_inputs(
        &mut self,
        tape: &mut Tape<T>,
        _params: &ParamStore<T>,
        layer: usize,
        h: Var,
    ) -> Result<LayerInputs> {
        let prior_override = (layer == 0).then(|| standard_prior(tape, self.config, self.batch));
        Ok(LayerInputs {
            state: h,
            posterior_in: h,
            prior_override,
        })
    }
}

/// Constant `N(0, I)` over the layer-0 latent shape.
pub fn standard_prior<T: Scalar>(tape: &mut Tape<T>, config: &ModelConfig, batch: usize) -> (Var, Var) {
    let r = config.resolutions[0];
    let shape = [batch, config.z_channels[0], r, r];
    let m = tape.constant(Tensor::zeros(&shape));
    let s = tape.constant(Tensor::zeros(&shape));
    (m, s)
}

#[derive(Debug, Clone, Copy)]
pub enum BlockMode {
    /// Sample `z` from the posterior built from these encoder features.
    Train { enc: Var },
    /// Sample `z` from the prior with its standard deviation scaled.
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Test hook: use the prior as the posterior at every layer.
    pub force_posterior_to_prior: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub h_out: Var,
    pub z: Var,
    pub q: Option<(Var, Var)>,
    pub p: (Var, Var),
    pub kl: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// Decoder state entering the layer, before any conditioning.
    pub h: Var,
    pub inputs: LayerInputs,
    pub block: BlockOutput,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
    /// `[N, 10M, H, W]` observation-model parameters.
    pub output: Var,
}

impl DecoderTrace {
    pub fn latents<T: Scalar>(&self, tape: &Tape<T>) -> LatentHierarchy<T> {
        LatentHierarchy {
            layers: self.layers.iter().map(|l| tape.value(l.block.z).clone()).collect(),
        }
    }

    pub fn prior_params<T: Scalar>(&self, tape: &Tape<T>, layer: usize) -> GaussianParams<T> {
        let (m, s) = self.layers[layer].block.p;
        GaussianParams {
            mean: tape.value(m).clone(),
            log_std: tape.value(s).clone(),
        }
    }

    pub fn posterior_params<T: Scalar>(&self, tape: &Tape<T>, layer: usize) -> Option<GaussianParams<T>> {
        self.layers[layer].block.q.map(|(m, s)| GaussianParams {
            mean: tape.value(m).clone(),
            log_std: tape.value(s).clone(),
        })
    }
}

/// Sampled latents `z_0..z_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHierarchy<T> {
    pub layers: Vec<Tensor<T>>,
}

/// ELBO decomposition in summed nats.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms<T> {
    pub total: T,
    pub nll: T,
    pub kl_per_layer: Vec<T>,
    /// Number of observed sub-pixels the sums run over.
    pub dims: usize,
}

impl<T: Scalar> ElboTerms<T> {
    pub fn kl_total(&self) -> T {
        self.kl_per_layer.iter().copied().sum()
    }

    /// `total` in nats per sub-pixel.
    pub fn per_dim(&self) -> T {
        self.total / T::from_usize(self.dims).unwrap()
    }
}

/// Loss terms recorded on a tape, in summed nats.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub nll: Var,
    pub kl: Vec<Var>,
    pub trace: DecoderTrace,
    pub dims: usize,
}

impl LossGraph {
    pub fn terms<T: Scalar>(&self, tape: &Tape<T>) -> ElboTerms<T> {
        let nll = tape.value(self.nll).item();
        let kl_per_layer: Vec<T> = self.kl.iter().map(|&k| tape.value(k).item()).collect();
        let total = nll + kl_per_layer.iter().copied().sum::<T>();
        ElboTerms {
            total,
            nll,
            kl_per_layer,
            dims: self.dims,
        }
    }
}

/// Architecture of the unconditional model; weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Vdvae {
    config: ModelConfig,
}

impl Vdvae {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.register_params(&mut store, &mut rng);
        store
    }

    pub(crate) fn register_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.config;
        let w = c.width;
        let mid = c.bottleneck_width;
        register_conv(store, rng, "encoder.stem", 3, w, 3, 1.0);
        let enc_res = c.encoder_resolutions();
        let enc_blocks = enc_res.len() * c.encoder_blocks_per_resolution;
        let enc_scale = (1.0 / enc_blocks as f64).sqrt();
        for &res in &enc_res {
            for b in 0..c.encoder_blocks_per_resolution {
                let spec = BlockSpec {
                    in_channels: w,
                    mid_channels: mid,
                    out_channels: w,
                    use_3x3: use_3x3(res),
                    residual: true,
                    last_init: LastInit::Scaled(enc_scale),
                };
                register_block(store, rng, &format!("encoder.r{res}.b{b}"), &spec);
            }
        }

        for res in self.decoder_bias_resolutions() {
            store.insert(format!("decoder.bias.r{res}"), Tensor::zeros(&[1, w, res, res]));
        }
        let dec_scale = (1.0 / c.num_layers() as f64).sqrt();
        for (j, (&res, &zc)) in c.resolutions.iter().zip(&c.z_channels).enumerate() {
            let prefix = format!("decoder.layer{j}");
            let k3 = use_3x3(res);
            let posterior = BlockSpec {
                in_channels: 2 * w,
                mid_channels: mid,
                out_channels: 2 * zc,
                use_3x3: k3,
                residual: false,
                last_init: LastInit::Scaled(1.0),
            };
            register_block(store, rng, &format!("{prefix}.posterior"), &posterior);
            let prior = BlockSpec {
                in_channels: w,
                mid_channels: mid,
                out_channels: 2 * zc + w,
                use_3x3: k3,
                residual: false,
                last_init: LastInit::Zero,
            };
            register_block(store, rng, &format!("{prefix}.prior"), &prior);
            register_conv(store, rng, &format!("{prefix}.z_proj"), zc, w, 1, dec_scale);
            let resnet = BlockSpec {
                in_channels: w,
                mid_channels: mid,
                out_channels: w,
                use_3x3: k3,
                residual: true,
                last_init: LastInit::Scaled(dec_scale),
            };
            register_block(store, rng, &format!("{prefix}.resnet"), &resnet);
        }
        register_conv(store, rng, "decoder.out", w, dmol::channels_for(c.mixture_components), 1, 1.0);
    }

    fn decoder_bias_resolutions(&self) -> Vec<usize> {
        let mut res = self.config.resolutions.clone();
        if *res.last().unwrap() < self.config.image_size {
            res.push(self.config.image_size);
        }
        res.dedup();
        res
    }

    fn check_image(&self, x: &Tensor<impl Scalar>) -> Result<usize> {
        let s = self.config.image_size;
        match x.shape() {
            [n, 3, h, w] if *h == s && *w == s && *n > 0 => Ok(*n),
            other => Err(Error::Argument(format!(
                "expected [N, 3, {s}, {s}] input, got {other:?}"
            ))),
        }
    }

    /// Bottom-up residual pass.
    pub fn encoder_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
    ) -> Result<EncoderActivations> {
        self.check_image(tape.value(x))?;
        let c = &self.config;
        let mut h = conv(tape, params, "encoder.stem", x)?;
        let mut by_resolution = BTreeMap::new();
        let mut prev = c.image_size;
        for res in c.encoder_resolutions() {
            h = tape.avg_pool(h, prev / res);
            for b in 0..c.encoder_blocks_per_resolution {
                h = block_forward(tape, params, &format!("encoder.r{res}.b{b}"), true, h)?;
            }
            by_resolution.insert(res, h);
            prev = res;
        }
        Ok(EncoderActivations {
            by_resolution,
            layer_resolutions: c.resolutions.clone(),
        })
    }

    /// One stochastic layer: prior from the state, posterior (in train mode)
    /// from state and encoder features, then `h + xpp + proj(z)` followed by
    /// a residual block.
    #[allow(clippy::too_many_arguments)]
    pub fn top_down_block<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        layer: usize,
        inputs: &LayerInputs,
        mode: BlockMode,
        rng: &mut R,
        opts: &ForwardOptions,
    ) -> Result<BlockOutput> {
        let c = &self.config;
        if layer >= c.num_layers() {
            return Err(Error::Contract(format!("layer {layer} beyond depth {}", c.depth())));
        }
        let zc = c.z_channels[layer];
        let w = c.width;
        let prefix = format!("decoder.layer{layer}");
        let lo = T::lit(gaussian::LOG_STD_MIN);
        let hi = T::lit(gaussian::LOG_STD_MAX);

        let pout = block_forward(tape, params, &format!("{prefix}.prior"), false, inputs.state)?;
        let p = match inputs.prior_override {
            Some(p) => p,
            None => {
                let m = tape.slice_channels(pout, 0, zc);
                let s = tape.slice_channels(pout, zc, 2 * zc);
                (m, tape.clamp(s, lo, hi))
            }
        };
        let xpp = tape.slice_channels(pout, 2 * zc, 2 * zc + w);
        let mut h = tape.add(inputs.state, xpp);

        let (z, q, kl) = match mode {
            BlockMode::Train { enc } => {
                let q = if opts.force_posterior_to_prior {
                    p
                } else {
                    let qin = tape.concat_channels(inputs.posterior_in, enc);
                    let qout = block_forward(tape, params, &format!("{prefix}.posterior"), false, qin)?;
                    let m = tape.slice_channels(qout, 0, zc);
                    let s = tape.slice_channels(qout, zc, 2 * zc);
                    (m, tape.clamp(s, lo, hi))
                };
                let eps = normal_tensor(rng, tape.value(q.0).shape());
                let z = tape.reparam(q.0, q.1, eps);
                let kl = tape.kl_sum(q.0, q.1, p.0, p.1);
                (z, Some(q), Some(kl))
            }
            BlockMode::Sample { temperature } => {
                let t = T::lit(temperature);
                let eps = normal_tensor::<T, _>(rng, tape.value(p.0).shape()).map(|v| v * t);
                (tape.reparam(p.0, p.1, eps), None, None)
            }
        };
        let zp = conv(tape, params, &format!("{prefix}.z_proj"), z)?;
        h = tape.add(h, zp);
        h = block_forward(tape, params, &format!("{prefix}.resnet"), true, h)?;
        Ok(BlockOutput { h_out: h, z, q, p, kl })
    }

    /// Run every top-down layer and the output head.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        batch: usize,
        enc: Option<&EncoderActivations>,
        temperature: f64,
        cond: &mut dyn Conditioning<T>,
        rng: &mut R,
        opts: &ForwardOptions,
    ) -> Result<DecoderTrace> {
        let c = &self.config;
        let mut layers = Vec::with_capacity(c.num_layers());
        let mut state: Option<(Var, usize)> = None;
        for (j, &res) in c.resolutions.iter().enumerate() {
            let h = self.enter_resolution(tape, params, state, res, batch)?;
            let inputs = cond.layer_inputs(tape, params, j, h)?;
            let mode = match enc {
                Some(e) => BlockMode::Train { enc: e.for_layer(j) },
                None => BlockMode::Sample { temperature },
            };
            let block = self.top_down_block(tape, params, j, &inputs, mode, rng, opts)?;
            layers.push(LayerTrace { h, inputs, block });
            state = Some((block.h_out, res));
        }
        let h = self.enter_resolution(tape, params, state, c.image_size, batch)?;
        let output = conv(tape, params, "decoder.out", h)?;
        Ok(DecoderTrace { layers, output })
    }

    /// Decoder state at `res`: the learned bias at the first layer, the
    /// upsampled previous state plus that resolution's bias when the
    /// resolution grows, and the previous state otherwise.
    fn enter_resolution<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        state: Option<(Var, usize)>,
        res: usize,
        batch: usize,
    ) -> Result<Var> {
        match state {
            None => {
                let b = tape.param(params, &format!("decoder.bias.r{res}"))?;
                Ok(tape.broadcast_batch(b, batch))
            }
            Some((h, prev)) if prev != res => {
                let up = tape.upsample(h, res / prev);
                let b = tape.param(params, &format!("decoder.bias.r{res}"))?;
                Ok(tape.add_batch_broadcast(up, b))
            }
            Some((h, _)) => Ok(h),
        }
    }

    /// Records the negative ELBO terms for a normalized batch `x`.
    pub fn loss_graph<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        rng: &mut R,
        opts: &ForwardOptions,
    ) -> Result<LossGraph> {
        let n = self.check_image(x)?;
        let xv = tape.constant(x.clone());
        let enc = self.encoder_forward(tape, params, xv)?;
        let mut cond = Unconditioned {
            config: &self.config,
            batch: n,
        };
        let trace = self.decoder_forward(tape, params, n, Some(&enc), 1.0, &mut cond, rng, opts)?;
        Ok(finish_loss(tape, trace, x, self.config.mixture_components))
    }

    pub fn elbo<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        rng: &mut R,
    ) -> Result<ElboTerms<T>> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, params, x, rng, &ForwardOptions::default())?;
        Ok(g.terms(&tape))
    }

    /// Ancestral sampling with prior standard deviations scaled by `temperature`.
    pub fn generate<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        n: usize,
        temperature: f64,
        seed: u64,
        decode: DecodeMode,
    ) -> Result<Vec<RgbImage>> {
        let out = self.generate_normalized(params, n, temperature, seed, decode)?;
        Ok((0..n).map(|i| denormalize(&out, i)).collect())
    }

    /// Like [`Vdvae::generate`] but returns the decoded `[N, 3, H, W]`
    /// tensor before quantization.
    pub fn generate_normalized<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        n: usize,
        temperature: f64,
        seed: u64,
        decode: DecodeMode,
    ) -> Result<Tensor<T>> {
        check_sampling_args(n, temperature)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let mut cond = Unconditioned {
            config: &self.config,
            batch: n,
        };
        let trace = self.decoder_forward(
            &mut tape,
            params,
            n,
            None,
            temperature,
            &mut cond,
            &mut rng,
            &ForwardOptions::default(),
        )?;
        Ok(dmol::decode(
            tape.value(trace.output),
            self.config.mixture_components,
            decode,
            &mut rng,
        ))
    }
}

pub(crate) fn check_sampling_args(n: usize, temperature: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Argument(format!("temperature {temperature} must be finite and >= 0")));
    }
    Ok(())
}

pub(crate) fn finish_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trace: DecoderTrace,
    x: &Tensor<T>,
    components: usize,
) -> LossGraph {
    let ll = tape.dmol_log_likelihood(trace.output, x.clone(), components);
    let nll = tape.mul_const(ll, -T::one());
    let kl = trace
        .layers
        .iter()
        .map(|l| l.block.kl.expect("train mode records KL"))
        .collect();
    LossGraph {
        nll,
        kl,
        trace,
        dims: x.len(),
    }
}

/// Summed log-likelihood of the normalized images `x` under decoder output
/// `decoder_output`.
pub fn observation_log_likelihood<T: Scalar>(
    x: &Tensor<T>,
    decoder_output: &Tensor<T>,
    components: usize,
) -> Result<T> {
    if !decoder_output.all_finite() {
        return Err(Error::Numeric("decoder output contains non-finite parameters".into()));
    }
    let (n, ch, h, w) = decoder_output.dims4();
    if ch != dmol::channels_for(components) || x.shape() != [n, 3, h, w] {
        return Err(Error::Shape(format!(
            "image {:?} vs decoder output {:?} with {components} components",
            x.shape(),
            decoder_output.shape()
        )));
    }
    Ok(dmol::log_likelihood(decoder_output, x, components))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::normalize_batch;

    fn tiny() -> Vdvae {
        Vdvae::new(ModelConfig::tiny16()).unwrap()
    }

    fn images(n: usize, salt: u8) -> Vec<RgbImage> {
        (0..n)
            .map(|i| {
                RgbImage::from_fn(16, 16, |y, x| {
                    let v = (y * 13 + x * 7 + i * 31) as u8 ^ salt;
                    [v, v.wrapping_mul(3), 255 - v]
                })
            })
            .collect()
    }

    fn encode(model: &Vdvae, params: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let acts = model.encoder_forward(&mut tape, params, xv).unwrap();
        (0..acts.num_layers()).map(|j| tape.value(acts.for_layer(j)).clone()).collect()
    }

    #[test]
    fn encoder_is_deterministic_and_batch_independent() {
        let model = tiny();
        let params = model.init_params::<f64>(3);
        let img = images(1, 0).pop().unwrap();
        let x = normalize_batch::<f64>(&[img.clone(), img]);
        let a = encode(&model, &params, &x);
        let b = encode(&model, &params, &x);
        assert_eq!(a, b);
        for (j, act) in a.iter().enumerate() {
            let r = model.config().resolutions[j];
            assert_eq!(act.shape(), &[2, 8, r, r]);
            assert_eq!(act.batch_item(0), act.batch_item(1));
        }
        let bad = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        let mut tape = Tape::new();
        let v = tape.constant(bad);
        assert!(matches!(model.encoder_forward(&mut tape, &params, v), Err(Error::Argument(_))));
    }

    #[test]
    fn zeroed_residual_branches_leave_the_stem_path() {
        let model = tiny();
        let mut params = model.init_params::<f64>(4);
        let names: Vec<String> = params
            .names()
            .filter(|n| n.starts_with("encoder.r") && n.contains(".c4."))
            .map(str::to_string)
            .collect();
        for n in names {
            params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
        let acts = encode(&model, &params, &x);
        // With a zero input the stem emits its bias everywhere.
        let bias = params.get("encoder.stem.bias").unwrap().data().to_vec();
        for act in acts {
            let (_, c, h, w) = act.dims4();
            for ch in 0..c {
                for i in 0..h * w {
                    assert_eq!(act.data()[ch * h * w + i], bias[ch]);
                }
            }
        }
    }

    fn sample_block(model: &Vdvae, params: &ParamStore<f64>, t: f64, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = tape.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[1, 8, 4, 4]));
        let inputs = LayerInputs {
            state: h,
            posterior_in: h,
            prior_override: None,
        };
        let out = model
            .top_down_block(&mut tape, params, 1, &inputs, BlockMode::Sample { temperature: t }, &mut rng, &Default::default())
            .unwrap();
        (
            tape.value(out.h_out).clone(),
            tape.value(out.z).clone(),
            tape.value(out.p.0).clone(),
        )
    }

    #[test]
    fn zero_temperature_samples_the_prior_mean() {
        let model = tiny();
        let mut params = model.init_params::<f64>(5);
        // Give the prior head nonzero weights so the mean is not trivially 0.
        let w = params.get_mut("decoder.layer1.prior.c4.weight").unwrap();
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = ((i % 7) as f64 - 3.0) * 0.1;
        }
        let (h0, z0, pm) = sample_block(&model, &params, 0.0, 1);
        assert_eq!(z0, pm);
        assert!(pm.max_abs_diff(&Tensor::zeros(pm.shape())) > 0.0);
        let (h1, z1, _) = sample_block(&model, &params, 0.0, 2);
        assert_eq!((h0, z0), (h1, z1));
        let (ha, za, _) = sample_block(&model, &params, 1.0, 7);
        let (hb, zb, _) = sample_block(&model, &params, 1.0, 7);
        assert_eq!((ha, za.clone()), (hb, zb));
        assert_ne!(za, pm);
    }

    #[test]
    fn forcing_posterior_to_prior_zeroes_the_kl() {
        let model = tiny();
        let params = model.init_params::<f64>(6);
        let x = normalize_batch::<f64>(&images(2, 5));
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            force_posterior_to_prior: true,
        };
        let g = model
            .loss_graph(&mut tape, &params, &x, &mut ChaCha8Rng::seed_from_u64(1), &opts)
            .unwrap();
        let terms = g.terms(&tape);
        assert!(terms.kl_per_layer.iter().all(|&k| k == 0.0));
        assert_eq!(terms.total, terms.nll);
    }

    #[test]
    fn elbo_terms_are_consistent() {
        let model = tiny();
        let params = model.init_params::<f64>(7);
        let x = normalize_batch::<f64>(&images(2, 9));
        let terms = model.elbo(&params, &x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(terms.kl_per_layer.len(), 4);
        assert!(terms.kl_per_layer.iter().all(|&k| k >= -1e-6));
        assert!(terms.nll.is_finite() && terms.nll > 0.0);
        assert!((terms.total - terms.nll - terms.kl_total()).abs() < 1e-9);
        assert_eq!(terms.dims, 2 * 3 * 16 * 16);
        assert!((terms.per_dim() - terms.total / 1536.0).abs() < 1e-12);
        let again = model.elbo(&params, &x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(terms, again);
    }

    /// 1x1 "images" with one latent channel per layer: every term of the
    /// ELBO is a handful of scalars that can be recomputed directly.
    #[test]
    fn one_pixel_elbo_matches_scalar_oracle() {
        let config = ModelConfig {
            image_size: 1,
            width: 4,
            bottleneck_width: 2,
            resolutions: vec![1, 1],
            z_channels: vec![1, 1],
            encoder_blocks_per_resolution: 1,
            mixture_components: 1,
        };
        let model = Vdvae::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..10 {
            let mut params = model.init_params::<f64>(seed);
            // Random prior heads so layer 1 has a nontrivial prior.
            for v in params.get_mut("decoder.layer1.prior.c4.weight").unwrap().data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let pixel: [u8; 3] = [rng.random(), rng.random(), [0u8, 255, 128][seed as usize % 3]];
            let img = RgbImage::new(1, 1, pixel.to_vec()).unwrap();
            let x = normalize_batch::<f64>(&[img]);
            let mut tape = Tape::new();
            let g = model
                .loss_graph(&mut tape, &params, &x, &mut ChaCha8Rng::seed_from_u64(seed), &Default::default())
                .unwrap();
            let terms = g.terms(&tape);

            let mut kl_oracle = 0.0;
            for j in 0..2 {
                let q = g.trace.posterior_params(&tape, j).unwrap();
                let p = g.trace.prior_params(&tape, j);
                let (mq, sq) = (q.mean.item(), q.log_std.item().exp());
                let (mp, sp) = (p.mean.item(), p.log_std.item().exp());
                let kl = sp.ln() - sq.ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5;
                assert!((terms.kl_per_layer[j] - kl).abs() < 1e-10);
                kl_oracle += kl;
            }
            assert_eq!(g.trace.prior_params(&tape, 0).mean.item(), 0.0);

            let out = tape.value(g.trace.output).data().to_vec();
            let xs: Vec<f64> = pixel.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
            let coeff = [out[7].tanh(), out[8].tanh(), out[9].tanh()];
            let means = [out[1], out[2] + coeff[0] * xs[0], out[3] + coeff[1] * xs[0] + coeff[2] * xs[1]];
            let cdf = |v: f64, m: f64, s: f64| 1.0 / (1.0 + (-(v - m) / s).exp());
            let mut ll = 0.0;
            for c in 0..3 {
                let s = out[4 + c].max(-7.0).exp();
                let prob = match pixel[c] {
                    0 => cdf(xs[c] + 1.0 / 255.0, means[c], s),
                    255 => 1.0 - cdf(xs[c] - 1.0 / 255.0, means[c], s),
                    _ => cdf(xs[c] + 1.0 / 255.0, means[c], s) - cdf(xs[c] - 1.0 / 255.0, means[c], s),
                };
                ll += prob.ln();
            }
            assert!((terms.nll + ll).abs() < 1e-9, "{} vs {}", terms.nll, -ll);
            assert!((terms.total - (kl_oracle - ll)).abs() < 1e-9);
        }
    }

    #[test]
    fn generate_respects_seed_and_temperature() {
        let model = tiny();
        let params = model.init_params::<f32>(8);
        let a = model.generate(&params, 2, 0.0, 1, DecodeMode::Mean).unwrap();
        let b = model.generate(&params, 2, 0.0, 99, DecodeMode::Mean).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|im| im.shape() == (16, 16)));
        let c = model.generate(&params, 3, 0.7, 5, DecodeMode::Mean).unwrap();
        let d = model.generate(&params, 3, 0.7, 5, DecodeMode::Mean).unwrap();
        assert_eq!(c, d);
        assert!(model.generate(&params, 0, 1.0, 0, DecodeMode::Mean).is_err());
        assert!(model.generate(&params, 1, -0.1, 0, DecodeMode::Mean).is_err());
        let s = model.generate(&params, 1, 1.0, 5, DecodeMode::Sample).unwrap();
        assert_eq!(s[0].shape(), (16, 16));
    }

    #[test]
    fn observation_likelihood_rejects_non_finite_parameters() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let mut out = Tensor::<f64>::zeros(&[1, 20, 2, 2]);
        assert!(observation_log_likelihood(&x, &out, 2).unwrap().is_finite());
        out.data_mut()[5] = f64::NAN;
        assert!(matches!(observation_log_likelihood(&x, &out, 2), Err(Error::Numeric(_))));
        let out = Tensor::<f64>::zeros(&[1, 10, 2, 2]);
        assert!(matches!(observation_log_likelihood(&x, &out, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_names_are_stable() {
        let model = tiny();
        let a = model.init_params::<f32>(1);
        let b = model.init_params::<f32>(2);
        assert_eq!(a.names().collect::<Vec<_>>(), b.names().collect::<Vec<_>>());
        assert!(a.contains("decoder.bias.r2") && a.contains("decoder.bias.r16"));
        assert!(a.contains("decoder.layer3.resnet.c4.weight"));
        assert!(a.contains("encoder.r16.b0.c1.weight"));
        // 3x3 convolutions are skipped at 2x2.
        assert_eq!(a.get("decoder.layer0.prior.c2.weight").unwrap().shape(), &[4, 4, 1, 1]);
        assert_eq!(a.get("decoder.layer1.prior.c2.weight").unwrap().shape(), &[4, 4, 3, 3]);
        assert!(a.get("decoder.layer2.prior.c4.weight").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
