//! Optimization: transfer-learning import, freeze policy, Adam with gradient
//! clipping and step skipping, EMA, checkpoint rotation and resumable state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, Checkpoint, TensorEntry};
use crate::data::{sample_batch, Batch, Dataset};
use crate::error::{Error, Result};
use crate::image::{bicubic_upscale, denormalize, RgbImage};
use crate::params::ParamStore;
use crate::sr::{is_sr_only, SrModel};
use crate::tensor::Tensor;
use crate::vdvae::{DecodeMode, ForwardOptions, LossGraph, Vdvae};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    None,
    /// Keep the x-path encoder at its imported values.
    #[default]
    EncoderFrozen,
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "encoder_frozen" => Ok(Self::EncoderFrozen),
            other => Err(Error::Argument(format!(
                "unknown freeze policy {other:?} (expected none or encoder_frozen)"
            ))),
        }
    }
}

/// Optimizer and loop settings. The freeze policy applies to conditional
/// training only; unconditional training updates every tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub grad_clip_norm: f64,
    pub grad_skip_threshold: f64,
    /// Abort once more than this many steps in a row were skipped.
    pub max_consecutive_skips: u32,
    pub freeze_policy: FreezePolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    /// Linear learning-rate warmup length; 0 disables it.
    pub warmup_steps: u64,
    /// Linear KL-weight warmup length; 0 disables it.
    pub kl_warmup_steps: u64,
    /// Per-layer KL floor in nats; 0 disables it.
    pub free_bits: f64,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    pub sample_every: u64,
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 1,
            max_steps: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip_norm: 200.0,
            grad_skip_threshold: 400.0,
            max_consecutive_skips: 10,
            freeze_policy: FreezePolicy::EncoderFrozen,
            ema_decay: None,
            warmup_steps: 0,
            kl_warmup_steps: 0,
            free_bits: 0.0,
            seed: 0,
            checkpoint_every: 0,
            keep_checkpoints: 3,
            sample_every: 0,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.max_steps == 0 || self.batch_size == 0 {
            return fail("max_steps and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon <= 0.0 || self.grad_clip_norm <= 0.0 || self.grad_skip_threshold <= 0.0 {
            return fail("adam_epsilon, grad_clip_norm and grad_skip_threshold must be positive");
        }
        if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return fail("ema_decay must lie in [0, 1)");
        }
        if !(self.free_bits >= 0.0) {
            return fail("free_bits must be non-negative");
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    fn kl_weight_at(&self, step: u64) -> f64 {
        if self.kl_warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.kl_warmup_steps as f64).min(1.0)
        }
    }
}

/// Split of parameter names into optimized and frozen sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

pub fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("encoder.")
}

pub fn apply_freeze_policy(params: &ParamStore<f32>, policy: FreezePolicy) -> ParamPartition {
    let (frozen, trainable) = params
        .names()
        .map(str::to_string)
        .partition(|n| policy == FreezePolicy::EncoderFrozen && is_encoder_tensor(n));
    ParamPartition { trainable, frozen }
}

/// Which tensors came from the checkpoint and which kept fresh values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImportManifest {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Fresh SR weights (from `seed`) with every encoder/decoder tensor replaced
/// by its namesake from `source`.
pub fn import_pretrained(source: &Checkpoint, model: &SrModel, seed: u64) -> Result<(ParamStore<f32>, ImportManifest)> {
    let mut params = model.init_params::<f32>(seed);
    let mut offenders = Vec::new();
    for (name, t) in params.iter() {
        if is_sr_only(name) {
            continue;
        }
        match source.params.get(name) {
            Err(_) => offenders.push(format!("{name} (missing from checkpoint)")),
            Ok(s) if s.shape() != t.shape() => {
                offenders.push(format!("{name} (checkpoint {:?}, model {:?})", s.shape(), t.shape()))
            }
            Ok(_) => {}
        }
    }
    for name in source.params.names() {
        if !is_sr_only(name) && !params.contains(name) {
            offenders.push(format!("{name} (not in model)"));
        }
    }
    if !offenders.is_empty() {
        offenders.sort();
        return Err(Error::Import { offenders });
    }
    let mut manifest = ImportManifest::default();
    for (name, t) in params.iter_mut() {
        if is_sr_only(name) {
            manifest.fresh.push(name.to_string());
        } else {
            *t = source.params.get(name)?.clone();
            manifest.copied.push(name.to_string());
        }
    }
    Ok((params, manifest))
}

pub fn import_pretrained_from(dir: impl AsRef<Path>, model: &SrModel, seed: u64) -> Result<(ParamStore<f32>, ImportManifest)> {
    import_pretrained(&checkpoint::load(dir)?, model, seed)
}

/// First and second Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of applied updates.
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore<f32>) -> Self {
        let zeros: ParamStore<f32> = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of the `trainable` tensors.
pub fn adam_update(
    state: &mut AdamState,
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    trainable: &BTreeSet<String>,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let step = (lr / c1) as f32;
    let inv_c2 = (1.0 / c2) as f32;
    let eps = config.adam_epsilon as f32;
    for name in trainable {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Structure(format!("no gradient for {name}")))?;
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        let p = params.get_mut(name)?.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1f * m[i] + (1.0 - b1f) * gi;
            v[i] = b2f * v[i] + (1.0 - b2f) * gi * gi;
            p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss terms recorded on a tape, in summed nats.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub nll: Var,
    pub kl: Vec<Var>,
    pub dims: usize,
}

impl From<LossGraph> for LossTerms {
    fn from(g: LossGraph) -> Self {
        Self {
            nll: g.nll,
            kl: g.kl,
            dims: g.dims,
        }
    }
}

/// Something whose negative ELBO can be minimized.
pub trait Objective {
    fn loss_terms(
        &self,
        tape: &mut Tape<f32>,
        params: &ParamStore<f32>,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossTerms>;
}

/// A trainable model: objective plus the plumbing the loop needs.
pub trait TrainModel: Objective {
    /// Side of the HR training crops.
    fn crop_size(&self) -> usize;
    /// Scale factor when batches need LR inputs.
    fn lr_scale(&self) -> Option<usize>;
    fn checkpoint(&self, params: &ParamStore<f32>) -> Checkpoint;
    /// Images written to the run's sample grid.
    fn samples(&self, params: &ParamStore<f32>, batch: &Batch, seed: u64) -> Result<Vec<RgbImage>>;
}

impl Objective for Vdvae {
    fn loss_terms(
        &self,
        tape: &mut Tape<f32>,
        params: &ParamStore<f32>,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossTerms> {
        Ok(self.loss_graph(tape, params, &batch.x, rng, &ForwardOptions::default())?.into())
    }
}

impl TrainModel for Vdvae {
    fn crop_size(&self) -> usize {
        self.config().image_size
    }

    fn lr_scale(&self) -> Option<usize> {
        None
    }

    fn checkpoint(&self, params: &ParamStore<f32>) -> Checkpoint {
        Checkpoint::base(self.config().clone(), params.clone())
    }

    fn samples(&self, params: &ParamStore<f32>, _batch: &Batch, seed: u64) -> Result<Vec<RgbImage>> {
        self.generate(params, 4, 1.0, seed, DecodeMode::Mean)
    }
}

impl Objective for SrModel {
    fn loss_terms(
        &self,
        tape: &mut Tape<f32>,
        params: &ParamStore<f32>,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossTerms> {
        let y = batch
            .y
            .as_ref()
            .ok_or_else(|| Error::Argument("conditional training needs LR inputs".into()))?;
        Ok(self.loss_graph(tape, params, &batch.x, y, rng, &ForwardOptions::default())?.into())
    }
}

impl TrainModel for SrModel {
    fn crop_size(&self) -> usize {
        self.config().base.image_size
    }

    fn lr_scale(&self) -> Option<usize> {
        Some(self.config().scale_factor)
    }

    fn checkpoint(&self, params: &ParamStore<f32>) -> Checkpoint {
        Checkpoint::sr(self.config(), params.clone())
    }

    /// Bicubic, super-resolved (t = 0.1) and reference image of the first
    /// batch item.
    fn samples(&self, params: &ParamStore<f32>, batch: &Batch, seed: u64) -> Result<Vec<RgbImage>> {
        let Some(y) = &batch.y else { return Ok(Vec::new()) };
        let lr = denormalize(y, 0);
        let s = self.config().scale_factor;
        Ok(vec![
            bicubic_upscale(&lr, s)?,
            self.super_resolve(params, &lr, 0.1, seed, DecodeMode::Mean)?,
            denormalize(&batch.x, 0),
        ])
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Steps taken, applied or skipped.
    pub step: u64,
    pub steps_applied: u64,
    pub steps_skipped: u64,
    pub consecutive_skips: u32,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub ema: Option<ParamStore<f32>>,
    /// Drives batch sampling.
    pub data_rng: ChaCha8Rng,
    /// Drives the posterior noise.
    pub noise_rng: ChaCha8Rng,
    /// Exponential moving average of applied-step losses.
    pub running_loss: Option<f64>,
}

const RUNNING_LOSS_DECAY: f64 = 0.99;
const TRAIN_STATE: &str = "train_state.toml";

impl TrainState {
    pub fn new(params: ParamStore<f32>, config: &TrainConfig) -> Self {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(1);
        Self {
            step: 0,
            steps_applied: 0,
            steps_skipped: 0,
            consecutive_skips: 0,
            adam: AdamState::zeros_like(&params),
            ema: config.ema_decay.map(|_| params.clone()),
            params,
            data_rng: ChaCha8Rng::seed_from_u64(config.seed),
            noise_rng,
            running_loss: None,
        }
    }

    /// Write the optimizer state next to a checkpoint in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let adam_m = checkpoint::write_tensors(dir, "adam_m", &self.adam.m)?;
        let adam_v = checkpoint::write_tensors(dir, "adam_v", &self.adam.v)?;
        let ema = match &self.ema {
            Some(e) => checkpoint::write_tensors(dir, "ema", e)?,
            None => Vec::new(),
        };
        let file = StateFile {
            step: self.step,
            steps_applied: self.steps_applied,
            steps_skipped: self.steps_skipped,
            consecutive_skips: self.consecutive_skips,
            adam_t: self.adam.t,
            running_loss: self.running_loss,
            data_rng: RngState::of(&self.data_rng),
            noise_rng: RngState::of(&self.noise_rng),
            adam_m,
            adam_v,
            ema,
        };
        let text = toml::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join(TRAIN_STATE), text)?;
        Ok(())
    }

    /// Restore the state saved by [`TrainState::save`] around `params`.
    pub fn load(dir: &Path, params: ParamStore<f32>) -> Result<Self> {
        let path = dir.join(TRAIN_STATE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.clone()),
            _ => Error::Io(e),
        })?;
        let file: StateFile = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let m = checkpoint::read_tensors(dir, &file.adam_m)?;
        let v = checkpoint::read_tensors(dir, &file.adam_v)?;
        let same_layout = |s: &ParamStore<f32>| {
            s.len() == params.len() && params.iter().all(|(n, t)| s.get(n).is_ok_and(|u| u.shape() == t.shape()))
        };
        if !same_layout(&m) || !same_layout(&v) {
            return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
        }
        let ema = if file.ema.is_empty() {
            None
        } else {
            Some(checkpoint::read_tensors(dir, &file.ema)?)
        };
        Ok(Self {
            step: file.step,
            steps_applied: file.steps_applied,
            steps_skipped: file.steps_skipped,
            consecutive_skips: file.consecutive_skips,
            params,
            adam: AdamState { t: file.adam_t, m, v },
            ema,
            data_rng: file.data_rng.restore()?,
            noise_rng: file.noise_rng.restore()?,
            running_loss: file.running_loss,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    step: u64,
    steps_applied: u64,
    steps_skipped: u64,
    consecutive_skips: u32,
    adam_t: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    running_loss: Option<f64>,
    data_rng: RngState,
    noise_rng: RngState,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
    #[serde(default)]
    ema: Vec<TensorEntry>,
}

/// ChaCha position as text: hex seed, stream and decimal word position.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("malformed RNG state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// One row of the metrics log. Values are per sub-pixel; non-finite values
/// are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: Option<f64>,
    pub nll: Option<f64>,
    pub kl_total: Option<f64>,
    pub grad_norm: Option<f64>,
    #[serde(with = "bool_as_int")]
    pub skipped: bool,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        Ok(u8::deserialize(d)? != 0)
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Forward, backward, clip, and apply Adam to `trainable`, or skip the update
/// when the loss or gradient norm is non-finite or the norm exceeds the skip
/// threshold. The step counter advances either way.
pub fn train_step<O: Objective + ?Sized>(
    objective: &O,
    config: &TrainConfig,
    trainable: &BTreeSet<String>,
    state: &mut TrainState,
    batch: &Batch,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let terms = objective.loss_terms(&mut tape, &state.params, batch, &mut state.noise_rng)?;
    let inv_dims = 1.0 / terms.dims as f64;
    let kl_raw: f64 = terms.kl.iter().map(|&k| tape.value(k).item() as f64).sum();
    let nll_raw = tape.value(terms.nll).item() as f64;

    let kl_terms: Vec<Var> = if config.free_bits > 0.0 {
        terms
            .kl
            .iter()
            .map(|&k| tape.max_const(k, config.free_bits as f32))
            .collect()
    } else {
        terms.kl.clone()
    };
    let kl_sum = tape.sum(&kl_terms);
    let kl_weighted = tape.mul_const(kl_sum, config.kl_weight_at(state.step) as f32);
    let total = tape.sum(&[terms.nll, kl_weighted]);
    let loss = tape.mul_const(total, inv_dims as f32);
    let loss_val = tape.value(loss).item() as f64;

    let grads = tape.backward(loss);
    let all = tape.param_grads(&grads);
    let grad_norm = trainable
        .iter()
        .filter_map(|n| all.get(n))
        .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();

    state.step += 1;
    let skipped = !loss_val.is_finite() || !grad_norm.is_finite() || grad_norm > config.grad_skip_threshold;
    if skipped {
        state.steps_skipped += 1;
        state.consecutive_skips += 1;
        log::warn!(
            "step {}: skipped (loss {loss_val}, grad norm {grad_norm})",
            state.step
        );
    } else {
        let mut grads = all;
        if grad_norm > config.grad_clip_norm {
            let scale = (config.grad_clip_norm / grad_norm) as f32;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
        adam_update(
            &mut state.adam,
            &mut state.params,
            &grads,
            trainable,
            config,
            config.lr_at(state.step - 1),
        )?;
        if let (Some(decay), Some(ema)) = (config.ema_decay, state.ema.as_mut()) {
            let d = decay as f32;
            for (name, e) in ema.iter_mut() {
                let p = state.params.get(name)?;
                for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                    *ev = d * *ev + (1.0 - d) * pv;
                }
            }
        }
        state.steps_applied += 1;
        state.consecutive_skips = 0;
        state.running_loss = Some(match state.running_loss {
            Some(r) => RUNNING_LOSS_DECAY * r + (1.0 - RUNNING_LOSS_DECAY) * loss_val,
            None => loss_val,
        });
    }
    Ok(StepMetrics {
        step: state.step,
        loss: finite(loss_val),
        nll: finite(nll_raw * inv_dims),
        kl_total: finite(kl_raw * inv_dims),
        grad_norm: finite(grad_norm),
        skipped,
    })
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    /// Fixed batch for periodic validation.
    pub val: Option<Batch>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    /// Rows written during this call.
    pub metrics: Vec<StepMetrics>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

/// Save a checkpoint with its optimizer state.
pub fn save_training_checkpoint<M: TrainModel + ?Sized>(model: &M, state: &TrainState, dir: &Path) -> Result<()> {
    checkpoint::save(dir, &model.checkpoint(&state.params))?;
    state.save(dir)
}

/// Reload a checkpoint written by [`save_training_checkpoint`].
pub fn load_training_checkpoint(dir: &Path) -> Result<(Checkpoint, TrainState)> {
    let ckpt = checkpoint::load(dir)?;
    let state = TrainState::load(dir, ckpt.params.clone())?;
    Ok((ckpt, state))
}

fn metrics_writer(path: &Path, fresh: bool) -> Result<csv::Writer<fs::File>> {
    let exists = path.exists();
    let file = if fresh || !exists {
        fs::File::create(path)?
    } else {
        OpenOptions::new().append(true).open(path)?
    };
    Ok(csv::WriterBuilder::new()
        .has_headers(fresh || !exists)
        .from_writer(file))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn rotate_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    while entries.len() > keep {
        fs::remove_dir_all(entries.remove(0))?;
    }
    Ok(())
}

/// Side-by-side strip of equally sized images.
pub fn tile_row(images: &[RgbImage]) -> Option<RgbImage> {
    let first = images.first()?;
    let (h, w) = first.shape();
    if images.iter().any(|im| im.shape() != (h, w)) {
        return None;
    }
    Some(RgbImage::from_fn(h, w * images.len(), |y, x| images[x / w].get(y, x % w)))
}

/// Negative ELBO per sub-pixel on `batch` with a fixed noise seed.
pub fn evaluate_loss<O: Objective + ?Sized>(objective: &O, params: &ParamStore<f32>, batch: &Batch, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms = objective.loss_terms(&mut tape, params, batch, &mut rng)?;
    let kl: f64 = terms.kl.iter().map(|&k| tape.value(k).item() as f64).sum();
    Ok((tape.value(terms.nll).item() as f64 + kl) / terms.dims as f64)
}

/// Run the loop from `state.step` up to `config.max_steps`, logging one
/// metrics row per step and writing periodic checkpoints, samples and
/// validation losses under `run.run_dir`. The final checkpoint, with its
/// optimizer state, goes to `run_dir/checkpoint`.
pub fn train<M: TrainModel + ?Sized>(
    model: &M,
    config: &TrainConfig,
    trainable: &BTreeSet<String>,
    dataset: &Dataset,
    mut state: TrainState,
    run: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let dir = &run.run_dir;
    fs::create_dir_all(dir)?;
    let mut writer = metrics_writer(&dir.join(METRICS_FILE), state.step == 0)?;
    let mut val_writer = match (&run.val, config.val_every) {
        (Some(_), n) if n > 0 => Some(metrics_writer(&dir.join("val.csv"), state.step == 0)?),
        _ => None,
    };
    let mut rows = Vec::new();
    while state.step < config.max_steps {
        let batch = sample_batch(
            dataset,
            config.batch_size,
            model.crop_size(),
            model.lr_scale(),
            &mut state.data_rng,
        )?;
        let row = train_step(model, config, trainable, &mut state, &batch)?;
        writer.serialize(&row).map_err(csv_err)?;
        writer.flush()?;
        if state.consecutive_skips > config.max_consecutive_skips {
            return Err(Error::TrainingAborted {
                step: state.step,
                reason: format!(
                    "{} consecutive skipped steps (last loss {:?}, grad norm {:?}, skip threshold {})",
                    state.consecutive_skips, row.loss, row.grad_norm, config.grad_skip_threshold
                ),
            });
        }
        rows.push(row);
        let at = |every: u64| every > 0 && state.step % every == 0;
        if at(config.checkpoint_every) && state.step < config.max_steps {
            let ckdir = dir.join("checkpoints");
            save_training_checkpoint(model, &state, &ckdir.join(format!("step-{:08}", state.step)))?;
            rotate_checkpoints(&ckdir, config.keep_checkpoints.max(1))?;
        }
        if at(config.sample_every) {
            if let Some(grid) = tile_row(&model.samples(&state.params, &batch, config.seed)?) {
                let sdir = dir.join("samples");
                fs::create_dir_all(&sdir)?;
                crate::image::save_png(&grid, sdir.join(format!("step-{:08}.png", state.step)))?;
            }
        }
        if let (Some(w), Some(val)) = (val_writer.as_mut(), &run.val) {
            if at(config.val_every) {
                let loss = evaluate_loss(model, &state.params, val, config.seed)?;
                w.serialize((state.step, loss)).map_err(csv_err)?;
                w.flush()?;
            }
        }
        if state.step % 100 == 0 {
            log::info!(
                "step {} loss {:?} (running {:?}), skipped {}",
                state.step,
                rows.last().and_then(|r| r.loss),
                state.running_loss,
                state.steps_skipped
            );
        }
    }
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    save_training_checkpoint(model, &state, &final_checkpoint)?;
    Ok(TrainOutcome {
        state,
        final_checkpoint,
        metrics: rows,
    })
}

/// Read a metrics log back.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}
