//! Low-resolution conditioning of the hierarchical VAE.
//!
//! An LR-encoder turns the low-resolution image `y` into one activation `g_j`
//! per conditioned layer (`j <= K'`, the layers whose resolution fits inside
//! `y`). The decoder state entering layer `j` becomes
//!
//! ```text
//! h~_0 = g_0
//! h~_j = h_j + alpha_j * g_j     1 <= j <= K'
//! h~_j = h_j                     otherwise
//! ```
//!
//! and `p(z_0 | y)` is a Gaussian whose parameters are linear maps of `g_0`.
//! Gates `alpha_j` and the top-prior maps start at zero, so a model whose
//! encoder and decoder are imported from an unconditional checkpoint starts
//! out computing the unconditional decoder on layers `1..`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{denormalize, extract_patches, normalize, stitch_patches, RgbImage};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::vdvae::blocks::{block_forward, conv, register_block, register_conv, use_3x3, BlockSpec, LastInit};
use crate::vdvae::{
    check_sampling_args, dmol, finish_loss, gaussian, Conditioning, DecodeMode, DecoderTrace, ElboTerms,
    ForwardOptions, GaussianParams, LayerInputs, LossGraph, ModelConfig, Vdvae,
};

/// Where the fused state `h~_j` is consumed on conditioned layers `j >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Prior, posterior and the residual state path all use `h~_j`.
    #[default]
    PriorAndPosterior,
    /// Only the posterior sees `h~_j`; prior and state use `h_j`.
    PosteriorOnly,
}

impl std::str::FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior_and_posterior" => Ok(Self::PriorAndPosterior),
            "posterior_only" => Ok(Self::PosteriorOnly),
            other => Err(Error::Argument(format!(
                "unknown condition mode {other:?} (expected prior_and_posterior or posterior_only)"
            ))),
        }
    }
}

impl std::fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PriorAndPosterior => "prior_and_posterior",
            Self::PosteriorOnly => "posterior_only",
        })
    }
}

/// Conditioning options layered over a base model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrOptions {
    pub scale_factor: usize,
    pub condition_mode: ConditionMode,
}

impl Default for SrOptions {
    fn default() -> Self {
        Self {
            scale_factor: 4,
            condition_mode: ConditionMode::PriorAndPosterior,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrModelConfig {
    pub base: ModelConfig,
    pub scale_factor: usize,
    pub condition_mode: ConditionMode,
}

impl SrModelConfig {
    pub fn new(base: ModelConfig, options: SrOptions) -> Self {
        Self {
            base,
            scale_factor: options.scale_factor,
            condition_mode: options.condition_mode,
        }
    }

    pub fn options(&self) -> SrOptions {
        SrOptions {
            scale_factor: self.scale_factor,
            condition_mode: self.condition_mode,
        }
    }

    /// Side of the low-resolution input.
    pub fn lr_size(&self) -> usize {
        self.base.image_size / self.scale_factor
    }

    /// `K'`: index of the finest conditioned layer.
    pub fn lr_depth(&self) -> usize {
        let lr = self.lr_size();
        self.base.resolutions.iter().filter(|&&r| r <= lr).count().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.scale_factor < 2 {
            return fail(format!("scale factor {} < 2", self.scale_factor));
        }
        if self.base.image_size % self.scale_factor != 0 {
            return fail(format!(
                "image size {} is not divisible by scale factor {}",
                self.base.image_size, self.scale_factor
            ));
        }
        let lr = self.lr_size();
        if self.base.resolutions[0] > lr {
            return fail(format!(
                "top layer resolution {} exceeds the {lr}x{lr} low-resolution input",
                self.base.resolutions[0]
            ));
        }
        if let Some(&r) = self.base.resolutions.iter().find(|&&r| r <= lr && lr % r != 0) {
            return fail(format!("conditioned resolution {r} does not divide {lr}"));
        }
        if self.lr_depth() >= self.base.depth() {
            return fail(format!(
                "every layer fits inside the {lr}x{lr} input; need K' < K (K' = {}, K = {})",
                self.lr_depth(),
                self.base.depth()
            ));
        }
        Ok(())
    }
}

/// LR-encoder activations `g_0..g_K'`.
#[derive(Debug, Clone)]
pub struct LrActivations {
    pub g: Vec<Var>,
}

/// VDVAE-SR: the base model plus LR-encoder, gates and conditional top prior.
#[derive(Debug, Clone)]
pub struct SrModel {
    base: Vdvae,
    config: SrModelConfig,
}

/// Super-resolved image plus the padding applied to reach a full patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SrOutput {
    pub image: RgbImage,
    /// LR shape after reflection padding, when padding was needed.
    pub padded_from: Option<(usize, usize)>,
}

impl SrModel {
    pub fn new(config: SrModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            base: Vdvae::new(config.base.clone())?,
            config,
        })
    }

    pub fn base(&self) -> &Vdvae {
        &self.base
    }

    pub fn config(&self) -> &SrModelConfig {
        &self.config
    }

    /// Same model with a different condition mode (weights are shared).
    pub fn with_mode(&self, mode: ConditionMode) -> Self {
        let mut config = self.config.clone();
        config.condition_mode = mode;
        Self {
            base: self.base.clone(),
            config,
        }
    }

    /// Fresh weights for every tensor. Base tensors are drawn first from the
    /// same stream as [`Vdvae::init_params`], so they equal an unconditional
    /// model initialized with the same seed.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.base.register_params(&mut store, &mut rng);
        self.register_sr_params(&mut store, &mut rng);
        store
    }

    pub(crate) fn register_sr_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.config.base;
        let w = c.width;
        let kp = self.config.lr_depth();
        register_conv(store, rng, "lr_encoder.stem", 3, w, 3, 1.0);
        let scale = (1.0 / (kp + 1) as f64).sqrt();
        for j in (0..=kp).rev() {
            let spec = BlockSpec {
                in_channels: w,
                mid_channels: c.bottleneck_width,
                out_channels: w,
                use_3x3: use_3x3(c.resolutions[j]),
                residual: true,
                last_init: LastInit::Scaled(scale),
            };
            register_block(store, rng, &format!("lr_encoder.layer{j}"), &spec);
            register_conv(store, rng, &format!("lr_encoder.proj{j}"), w, w, 1, 1.0);
        }
        for j in 1..=kp {
            store.insert(gate_name(j), Tensor::zeros(&[1]));
        }
        register_conv(store, rng, "top_prior.mean", w, c.z_channels[0], 1, 0.0);
        register_conv(store, rng, "top_prior.log_std", w, c.z_channels[0], 1, 0.0);
    }

    fn check_lr(&self, y: &Tensor<impl Scalar>) -> Result<usize> {
        let s = self.config.lr_size();
        match y.shape() {
            [n, 3, h, w] if *h == s && *w == s && *n > 0 => Ok(*n),
            other => Err(Error::Argument(format!(
                "expected [N, 3, {s}, {s}] low-resolution input, got {other:?}"
            ))),
        }
    }

    /// Bottom-up pass over `y`, emitting `g_j` at each conditioned layer
    /// (finest first, pooling whenever the layer resolution drops).
    pub fn lr_encoder_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        y: Var,
    ) -> Result<LrActivations> {
        self.check_lr(tape.value(y))?;
        let c = &self.config.base;
        let kp = self.config.lr_depth();
        let mut h = conv(tape, params, "lr_encoder.stem", y)?;
        let mut prev = self.config.lr_size();
        let mut g = vec![None; kp + 1];
        for j in (0..=kp).rev() {
            let res = c.resolutions[j];
            h = tape.avg_pool(h, prev / res);
            prev = res;
            h = block_forward(tape, params, &format!("lr_encoder.layer{j}"), true, h)?;
            g[j] = Some(conv(tape, params, &format!("lr_encoder.proj{j}"), h)?);
        }
        Ok(LrActivations {
            g: g.into_iter().map(|v| v.expect("every layer visited")).collect(),
        })
    }

    /// `h~_j` on the tape.
    pub fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        h: Var,
        g: &LrActivations,
        layer: usize,
    ) -> Result<Var> {
        let kp = self.config.lr_depth();
        if layer >= self.config.base.num_layers() {
            return Err(Error::Contract(format!(
                "layer {layer} beyond depth {}",
                self.config.base.depth()
            )));
        }
        Ok(match layer {
            0 => g.g[0],
            j if j <= kp => {
                let alpha = tape.param(params, &gate_name(j))?;
                let scaled = tape.scale_by(g.g[j], alpha);
                tape.add(h, scaled)
            }
            _ => h,
        })
    }

    /// `p(z_0 | y)` from `g_0`.
    pub fn conditional_top_prior<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        g0: Var,
    ) -> Result<(Var, Var)> {
        let m = conv(tape, params, "top_prior.mean", g0)?;
        let s = conv(tape, params, "top_prior.log_std", g0)?;
        let s = tape.clamp(s, T::lit(gaussian::LOG_STD_MIN), T::lit(gaussian::LOG_STD_MAX));
        Ok((m, s))
    }

    /// Records the negative conditional ELBO for a normalized pair.
    pub fn loss_graph<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        y: &Tensor<T>,
        rng: &mut R,
        opts: &ForwardOptions,
    ) -> Result<LossGraph> {
        let n = self.check_lr(y)?;
        if x.shape().first() != Some(&n) {
            return Err(Error::Argument(format!(
                "HR batch {:?} and LR batch {:?} differ in size",
                x.shape(),
                y.shape()
            )));
        }
        let xv = tape.constant(x.clone());
        let enc = self.base.encoder_forward(tape, params, xv)?;
        let yv = tape.constant(y.clone());
        let g = self.lr_encoder_forward(tape, params, yv)?;
        let mut cond = SrConditioning { model: self, g: &g };
        let trace = self
            .base
            .decoder_forward(tape, params, n, Some(&enc), 1.0, &mut cond, rng, opts)?;
        Ok(finish_loss(tape, trace, x, self.config.base.mixture_components))
    }

    pub fn conditional_elbo<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        y: &Tensor<T>,
        rng: &mut R,
    ) -> Result<ElboTerms<T>> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, params, x, y, rng, &ForwardOptions::default())?;
        Ok(g.terms(&tape))
    }

    /// Ancestral sampling through the conditional prior for a normalized LR
    /// batch. Returns the tape and trace so callers can inspect latents.
    pub fn sample_trace<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &ParamStore<T>,
        y: &Tensor<T>,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(Tape<T>, DecoderTrace)> {
        let n = self.check_lr(y)?;
        check_sampling_args(n, temperature)?;
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let g = self.lr_encoder_forward(&mut tape, params, yv)?;
        let mut cond = SrConditioning { model: self, g: &g };
        let trace = self.base.decoder_forward(
            &mut tape,
            params,
            n,
            None,
            temperature,
            &mut cond,
            rng,
            &ForwardOptions::default(),
        )?;
        Ok((tape, trace))
    }

    /// Decoded `[N, 3, H, W]` super-resolution of a normalized LR batch.
    pub fn sample_normalized<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &ParamStore<T>,
        y: &Tensor<T>,
        temperature: f64,
        decode: DecodeMode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let (tape, trace) = self.sample_trace(params, y, temperature, rng)?;
        Ok(dmol::decode(
            tape.value(trace.output),
            self.config.base.mixture_components,
            decode,
            rng,
        ))
    }

    /// Super-resolve one LR image no larger than the configured LR size.
    /// Smaller inputs are reflection-padded and the output cropped back.
    pub fn super_resolve<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        y: &RgbImage,
        temperature: f64,
        seed: u64,
        decode: DecodeMode,
    ) -> Result<RgbImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.super_resolve_with(params, y, temperature, decode, &mut rng)
    }

    fn super_resolve_with<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        y: &RgbImage,
        temperature: f64,
        decode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<RgbImage> {
        let lr = self.config.lr_size();
        let (h, w) = y.shape();
        if h > lr || w > lr {
            return Err(Error::Argument(format!(
                "{h}x{w} input exceeds the {lr}x{lr} model input; use the patchwise pipeline"
            )));
        }
        let padded = y.reflect_pad(lr, lr);
        let out = self.sample_normalized(params, &normalize::<T>(&padded), temperature, decode, rng)?;
        let s = self.config.scale_factor;
        let img = denormalize(&out, 0);
        if (h, w) == (lr, lr) {
            Ok(img)
        } else {
            img.crop(0, 0, h * s, w * s)
        }
    }

    /// Patchwise super-resolution of an LR image of any size. Patches use
    /// stride `patch_size - overlap`; patch `i` samples from its own RNG
    /// stream `(seed, i)`.
    #[allow(clippy::too_many_arguments)]
    pub fn super_resolve_image<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        y: &RgbImage,
        patch_size: usize,
        overlap: usize,
        temperature: f64,
        seed: u64,
        decode: DecodeMode,
    ) -> Result<SrOutput> {
        let lr = self.config.lr_size();
        if patch_size != lr {
            return Err(Error::Argument(format!(
                "patch size {patch_size} does not match the model's {lr}x{lr} input"
            )));
        }
        if overlap >= patch_size {
            return Err(Error::Argument(format!("overlap {overlap} must be below patch size {patch_size}")));
        }
        let (h, w) = y.shape();
        let padded = y.reflect_pad(patch_size, patch_size);
        let padded_from = (padded.shape() != (h, w)).then_some(padded.shape());
        let grid = extract_patches(&padded, patch_size, patch_size - overlap)?;
        let mut outs = Vec::with_capacity(grid.patches.len());
        for (i, patch) in grid.patches.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            outs.push(self.super_resolve_with(params, patch, temperature, decode, &mut rng)?);
        }
        let s = self.config.scale_factor;
        let stitched = stitch_patches(&grid.rescaled(outs, s))?;
        let image = if padded_from.is_some() {
            stitched.crop(0, 0, h * s, w * s)?
        } else {
            stitched
        };
        Ok(SrOutput { image, padded_from })
    }
}

pub fn gate_name(layer: usize) -> String {
    format!("gate.layer{layer}")
}

/// Names of tensors that exist only in the conditional model.
pub fn is_sr_only(name: &str) -> bool {
    name.starts_with("lr_encoder.") || name.starts_with("gate.") || name.starts_with("top_prior.")
}

struct SrConditioning<'a> {
    model: &'a SrModel,
    g: &'a LrActivations,
}

impl<T: Scalar> Conditioning<T> for SrConditioning<'_> {
    fn layer_inputs(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        layer: usize,
        h: Var,
    ) -> Result<LayerInputs> {
        let fused = self.model.fuse(tape, params, h, self.g, layer)?;
        if layer == 0 {
            // q(z_0 | x) keeps the unconditional decoder input.
            let top = self.model.conditional_top_prior(tape, params, self.g.g[0])?;
            return Ok(LayerInputs {
                state: fused,
                posterior_in: h,
                prior_override: Some(top),
            });
        }
        let state = match self.model.config.condition_mode {
            ConditionMode::PriorAndPosterior => fused,
            ConditionMode::PosteriorOnly => h,
        };
        Ok(LayerInputs {
            state,
            posterior_in: fused,
            prior_override: None,
        })
    }
}

/// Elementwise `h~_j` on plain tensors, with `gates[j - 1] = alpha_j`.
pub fn fuse_tensors<T: Scalar>(h: &Tensor<T>, g: &[Tensor<T>], gates: &[T], layer: usize) -> Result<Tensor<T>> {
    if layer >= g.len() {
        return Ok(h.clone());
    }
    if layer == 0 {
        return Ok(g[0].clone());
    }
    let alpha = *gates
        .get(layer - 1)
        .ok_or_else(|| Error::Contract(format!("no gate for layer {layer}")))?;
    if g[layer].shape() != h.shape() {
        return Err(Error::Shape(format!("h {:?} vs g {:?}", h.shape(), g[layer].shape())));
    }
    let data = h.data().iter().zip(g[layer].data()).map(|(&a, &b)| a + alpha * b).collect();
    Ok(Tensor::new(h.shape().to_vec(), data))
}

/// Conditional top prior evaluated on a plain `g_0` tensor.
pub fn top_prior_params<T: Scalar>(model: &SrModel, params: &ParamStore<T>, g0: &Tensor<T>) -> Result<GaussianParams<T>> {
    let mut tape = Tape::new();
    let g = tape.constant(g0.clone());
    let (m, s) = model.conditional_top_prior(&mut tape, params, g)?;
    GaussianParams::new(tape.value(m).clone(), tape.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::normalize_batch;
    use crate::vdvae::normal_tensor;

    fn tiny(mode: ConditionMode) -> SrModel {
        SrModel::new(SrModelConfig::new(
            ModelConfig::tiny16(),
            SrOptions {
                scale_factor: 4,
                condition_mode: mode,
            },
        ))
        .unwrap()
    }

    fn pair(salt: usize) -> (Tensor<f64>, Tensor<f64>) {
        let hr = RgbImage::from_fn(16, 16, |y, x| {
            let v = ((y * 11 + x * 5 + salt * 17) % 256) as u8;
            [v, 255 - v, v / 2]
        });
        let lr = crate::image::bicubic_downscale(&hr, 4).unwrap();
        (normalize_batch(&[hr]), normalize_batch(&[lr]))
    }

    fn set_gates(params: &mut ParamStore<f64>, kp: usize, value: f64) {
        for j in 1..=kp {
            params.get_mut(&gate_name(j)).unwrap().data_mut()[0] = value;
        }
    }

    #[test]
    fn conditioned_depth_follows_resolution() {
        let m = tiny(ConditionMode::PriorAndPosterior);
        assert_eq!((m.config().lr_size(), m.config().lr_depth()), (4, 1));
        let toy = SrModelConfig::new(ModelConfig::toy32(), SrOptions::default());
        assert_eq!((toy.lr_size(), toy.lr_depth()), (8, 3));
        toy.validate().unwrap();
        let bad = SrModelConfig::new(
            ModelConfig::toy32(),
            SrOptions {
                scale_factor: 1,
                ..Default::default()
            },
        );
        assert!(bad.validate().is_err());
        // every layer fits inside the LR image: K' == K
        let mut base = ModelConfig::tiny16();
        base.resolutions = vec![2, 2, 4, 4];
        assert!(SrModelConfig::new(base, SrOptions::default()).validate().is_err());
        assert_eq!("posterior_only".parse::<ConditionMode>().unwrap(), ConditionMode::PosteriorOnly);
        assert!("both".parse::<ConditionMode>().is_err());
    }

    #[test]
    fn lr_activations_match_layer_shapes() {
        let m = tiny(ConditionMode::PriorAndPosterior);
        let params = m.init_params::<f64>(1);
        let (_, y) = pair(0);
        let run = || {
            let mut tape = Tape::new();
            let yv = tape.constant(y.clone());
            let g = m.lr_encoder_forward(&mut tape, &params, yv).unwrap();
            g.g.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
        };
        let g = run();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].shape(), &[1, 8, 2, 2]);
        assert_eq!(g[1].shape(), &[1, 8, 4, 4]);
        assert_eq!(g, run());
        let (_, y2) = pair(3);
        let mut tape = Tape::new();
        let yv = tape.constant(y2);
        let g2 = m.lr_encoder_forward(&mut tape, &params, yv).unwrap();
        assert_ne!(tape.value(g2.g[1]), &g[1]);
        let mut tape = Tape::<f64>::new();
        let bad = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(matches!(m.lr_encoder_forward(&mut tape, &params, bad), Err(Error::Argument(_))));
    }

    #[test]
    fn fuse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h: Tensor<f64> = normal_tensor(&mut rng, &[1, 2, 4, 4]);
        let g: Vec<Tensor<f64>> = (0..4).map(|_| normal_tensor(&mut rng, &[1, 2, 4, 4])).collect();
        let gates = [0.5, 0.0, 0.0];
        assert_eq!(fuse_tensors(&h, &g, &gates, 3).unwrap(), h);
        assert_eq!(fuse_tensors(&h, &g, &gates, 0).unwrap(), g[0]);
        assert_eq!(fuse_tensors(&h, &g[..3], &gates, 3).unwrap(), h);
        let f1 = fuse_tensors(&h, &g, &gates, 1).unwrap();
        for i in 0..h.len() {
            assert_eq!(f1.data()[i], h.data()[i] + 0.5 * g[1].data()[i]);
        }
        assert!(matches!(fuse_tensors(&h, &g, &[], 2), Err(Error::Contract(_))));

        let m = tiny(ConditionMode::PriorAndPosterior);
        let params = m.init_params::<f64>(1);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let gv = tape.constant(g[1].clone());
        let acts = LrActivations { g: vec![gv, gv] };
        assert!(matches!(m.fuse(&mut tape, &params, hv, &acts, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_top_prior_is_standard_normal() {
        let m = tiny(ConditionMode::PriorAndPosterior);
        let params = m.init_params::<f64>(3);
        let g0 = normal_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[2, 8, 2, 2]);
        let p = top_prior_params(&m, &params, &g0).unwrap();
        assert_eq!(p.mean.shape(), &[2, 2, 2, 2]);
        assert!(p.mean.data().iter().chain(p.log_std.data()).all(|&v| v == 0.0));
        let q = GaussianParams::new(
            normal_tensor(&mut ChaCha8Rng::seed_from_u64(5), &[2, 2, 2, 2]),
            normal_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[2, 2, 2, 2]),
        )
        .unwrap();
        let a = crate::vdvae::gaussian_kl(&q, &p).unwrap();
        let b = crate::vdvae::gaussian_kl(&q, &GaussianParams::standard(&[2, 2, 2, 2])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn zero_gates_keep_block_inputs_unchanged() {
        let m = tiny(ConditionMode::PriorAndPosterior);
        let params = m.init_params::<f64>(5);
        let (x, y) = pair(1);
        let mut tape = Tape::new();
        let g = m
            .loss_graph(&mut tape, &params, &x, &y, &mut ChaCha8Rng::seed_from_u64(0), &Default::default())
            .unwrap();
        for (j, layer) in g.trace.layers.iter().enumerate().skip(1) {
            assert_eq!(tape.value(layer.inputs.state), tape.value(layer.h), "layer {j}");
            assert_eq!(tape.value(layer.inputs.posterior_in), tape.value(layer.h), "layer {j}");
        }
        let terms = g.terms(&tape);
        assert!(terms.nll.is_finite());
        assert!(terms.kl_per_layer.iter().all(|&k| k.is_finite() && k >= -1e-6));
    }

    fn layer_tensors(m: &SrModel, params: &ParamStore<f64>) -> Vec<[Tensor<f64>; 4]> {
        let (x, y) = pair(2);
        let mut tape = Tape::new();
        let g = m
            .loss_graph(&mut tape, params, &x, &y, &mut ChaCha8Rng::seed_from_u64(3), &Default::default())
            .unwrap();
        g.trace
            .layers
            .iter()
            .map(|l| {
                let (pm, ps) = l.block.p;
                let (qm, _) = l.block.q.unwrap();
                [tape.value(pm).clone(), tape.value(ps).clone(), tape.value(qm).clone(), tape.value(l.block.z).clone()]
            })
            .collect()
    }

    #[test]
    fn posterior_only_mode_is_a_different_graph_once_gates_open() {
        let full = tiny(ConditionMode::PriorAndPosterior);
        let post = full.with_mode(ConditionMode::PosteriorOnly);
        let mut params = full.init_params::<f64>(6);
        for v in params.get_mut("decoder.layer1.prior.c4.weight").unwrap().data_mut() {
            *v = 0.05;
        }
        assert_eq!(layer_tensors(&full, &params), layer_tensors(&post, &params));

        set_gates(&mut params, 1, 0.7);
        let a = layer_tensors(&full, &params);
        let b = layer_tensors(&post, &params);
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1][0], b[1][0], "layer-1 prior means should differ");
        // The posterior sees h~ in both modes.
        assert_eq!(a[1][2], b[1][2]);
    }

    #[test]
    fn super_resolve_shapes_and_determinism() {
        let m = tiny(ConditionMode::PriorAndPosterior);
        let params = m.init_params::<f32>(7);
        let y = RgbImage::from_fn(4, 4, |yy, xx| [(yy * 60) as u8, (xx * 60) as u8, 90]);
        let a = m.super_resolve(&params, &y, 0.0, 1, DecodeMode::Mean).unwrap();
        let b = m.super_resolve(&params, &y, 0.0, 2, DecodeMode::Mean).unwrap();
        assert_eq!(a.shape(), (16, 16));
        assert_eq!(a, b);
        let small = y.crop(0, 0, 3, 2).unwrap();
        assert_eq!(m.super_resolve(&params, &small, 0.5, 1, DecodeMode::Mean).unwrap().shape(), (12, 8));
        let big = RgbImage::filled(5, 4, [0; 3]);
        assert!(m.super_resolve(&params, &big, 0.0, 1, DecodeMode::Mean).is_err());

        let one = m.super_resolve_image(&params, &y, 4, 0, 0.8, 11, DecodeMode::Mean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(0);
        let direct = m.super_resolve_with(&params, &y, 0.8, DecodeMode::Mean, &mut rng).unwrap();
        assert_eq!(one.image, direct);
        assert_eq!(one.padded_from, None);
    }

    #[test]
    fn patchwise_output_shapes_and_seams() {
        let m = tiny(ConditionMode::PriorAndPosterior);
        let params = m.init_params::<f32>(8);
        for (h, w, overlap) in [(4, 4, 0), (7, 9, 1), (3, 10, 2), (12, 8, 0)] {
            let y = RgbImage::from_fn(h, w, |a, b| [(a * 20) as u8, (b * 20) as u8, 7]);
            let out = m.super_resolve_image(&params, &y, 4, overlap, 0.5, 3, DecodeMode::Mean).unwrap();
            assert_eq!(out.image.shape(), (4 * h, 4 * w));
            assert_eq!(out.padded_from.is_some(), h < 4 || w < 4);
        }
        let flat = RgbImage::filled(12, 8, [120, 40, 200]);
        let out = m.super_resolve_image(&params, &flat, 4, 0, 0.0, 3, DecodeMode::Mean).unwrap();
        let tile = out.image.crop(0, 0, 16, 16).unwrap();
        for ty in 0..3 {
            for tx in 0..2 {
                assert_eq!(out.image.crop(ty * 16, tx * 16, 16, 16).unwrap(), tile);
            }
        }
        assert!(m.super_resolve_image(&params, &flat, 8, 0, 0.0, 3, DecodeMode::Mean).is_err());
        assert!(m.super_resolve_image(&params, &flat, 4, 4, 0.0, 3, DecodeMode::Mean).is_err());
    }

    #[test]
    fn base_tensors_match_unconditional_init() {
        let m = tiny(ConditionMode::PriorAndPosterior);
        let sr = m.init_params::<f32>(9);
        let base = m.base().init_params::<f32>(9);
        for (name, t) in base.iter() {
            assert_eq!(sr.get(name).unwrap(), t);
        }
        assert_eq!(sr.len() - base.len(), sr.names().filter(|n| is_sr_only(n)).count());
        assert_eq!(sr.get("gate.layer1").unwrap().data(), &[0.0]);
        assert!(!sr.contains("gate.layer0") && !sr.contains("gate.layer2"));
    }
}
