use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::Serialize;
use vdvae_sr::checkpoint::{self, Checkpoint, ModelKind};
use vdvae_sr::config::RunConfig;
use vdvae_sr::data::Dataset;
use vdvae_sr::evaluation::{
    evaluate_dataset, temperature_sweep, write_report, write_sweep, BicubicMethod, EvalOptions, IdentityStub,
    MetricReport, SrMethod, VdvaeSrMethod,
};
use vdvae_sr::image::{load_image, save_png};
use vdvae_sr::sr::SrModel;
use vdvae_sr::training::{
    apply_freeze_policy, import_pretrained, load_training_checkpoint, train, RunOptions, TrainModel, TrainOutcome,
    TrainState,
};
use vdvae_sr::vdvae::{ModelConfig, Vdvae};
use vdvae_sr::ParamStore;

use crate::{
    ConfigArgs, EvalArgs, EvaluateArgs, InferenceArgs, Method, Preset, SuperResolveArgs, SweepArgs, TrainArgs,
    TrainBaseArgs, TrainSrArgs,
};

pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration; exit status 2.
    Usage(String),
    /// Anything that went wrong while running; exit status 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<vdvae_sr::Error> for Failure {
    fn from(e: vdvae_sr::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Toy32 => ModelConfig::toy32(),
            Preset::Toy64 => ModelConfig::toy64(),
            Preset::Tiny16 => ModelConfig::tiny16(),
        }
    }
}

/// Defaults, then the config file, then `--preset`, `--set` and finally
/// the named flags. Also reports whether the model section was given
/// explicitly.
fn resolve_config(
    args: &ConfigArgs,
    preset: Option<Preset>,
    flags: impl FnOnce(&mut RunConfig) -> CmdResult,
) -> CmdResult<(RunConfig, bool)> {
    let mut cfg = RunConfig::default();
    let mut model_given = false;
    if let Some(path) = &args.config {
        require_file(path, "config file")?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = RunConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        model_given = toml::from_str::<toml::Table>(&text).is_ok_and(|t| t.contains_key("model"));
    }
    if let Some(p) = preset {
        cfg.model = p.config();
        model_given = true;
    }
    cfg.apply_overrides(&args.overrides).map_err(|e| usage(e.to_string()))?;
    model_given |= args.overrides.iter().any(|o| o.trim_start().starts_with("model."));
    flags(&mut cfg)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok((cfg, model_given))
}

fn parse_flag<T: std::str::FromStr>(value: &Option<String>, flag: &str) -> CmdResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .as_deref()
        .map(|v| v.parse::<T>().map_err(|e| usage(format!("--{flag}: {e}"))))
        .transpose()
}

fn apply_train_flags(a: &TrainArgs, cfg: &mut RunConfig) {
    let t = &mut cfg.train;
    if let Some(v) = a.max_steps {
        t.max_steps = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.sample_every {
        t.sample_every = v;
    }
}

fn apply_inference_flags(a: &InferenceArgs, cfg: &mut RunConfig) -> CmdResult {
    let e = &mut cfg.eval;
    if let Some(v) = a.temperature {
        e.temperature = v;
    }
    if let Some(v) = a.patch_size {
        e.patch_size = Some(v);
    }
    if let Some(v) = a.overlap {
        e.overlap = v;
    }
    if let Some(v) = a.seed {
        e.seed = v;
    }
    if let Some(v) = &a.decode {
        e.decode = match v.as_str() {
            "mean" => vdvae_sr::vdvae::DecodeMode::Mean,
            "sample" => vdvae_sr::vdvae::DecodeMode::Sample,
            other => return Err(usage(format!("--decode: unknown mode {other:?} (expected mean or sample)"))),
        };
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    data_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    resumed_from: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrained: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    condition_mode: Option<String>,
    steps: u64,
    steps_applied: u64,
    steps_skipped: u64,
    final_checkpoint: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    import: Option<ImportRecord>,
}

#[derive(Serialize)]
struct ImportRecord {
    copied_tensors: usize,
    fresh_tensors: usize,
    frozen_tensors: usize,
    /// Post-run check that every frozen tensor kept its imported value.
    frozen_unchanged: bool,
}

fn write_manifest(run_dir: &Path, manifest: &RunManifest) -> CmdResult {
    let text = toml::to_string(manifest).context("serializing run manifest")?;
    fs::write(run_dir.join(RUN_MANIFEST), text).context("writing run manifest")?;
    Ok(())
}

fn load_dataset(dir: &Path) -> CmdResult<Dataset> {
    let ds = Dataset::load_dir(dir).with_context(|| format!("loading images from {}", dir.display()))?;
    if ds.is_empty() {
        return Err(usage(format!("no png/jpg images in {}", dir.display())));
    }
    Ok(ds)
}

fn run_training<M: TrainModel>(
    model: &M,
    cfg: &RunConfig,
    trainable: &BTreeSet<String>,
    data: &Dataset,
    state: TrainState,
    run_dir: &Path,
) -> CmdResult<TrainOutcome> {
    cfg.save(run_dir)?;
    let run = RunOptions {
        run_dir: run_dir.to_path_buf(),
        val: None,
    };
    let outcome = train(model, &cfg.train, trainable, data, state, &run)?;
    println!(
        "trained {} steps ({} skipped); checkpoint at {}",
        outcome.state.step,
        outcome.state.steps_skipped,
        outcome.final_checkpoint.display()
    );
    Ok(outcome)
}

fn resume_state(path: &Path, kind: ModelKind, check: impl FnOnce(&Checkpoint) -> bool) -> CmdResult<TrainState> {
    require_dir(path, "resume checkpoint")?;
    let (ckpt, state) = load_training_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.kind != kind || !check(&ckpt) {
        return Err(Failure::Runtime(anyhow!(
            "{} was written for a different model than the one configured",
            path.display()
        )));
    }
    Ok(state)
}

pub fn train_base(args: TrainBaseArgs) -> CmdResult {
    let a = &args.train;
    require_dir(&a.data_dir, "data directory")?;
    let (cfg, _) = resolve_config(&a.config, a.preset, |c| {
        apply_train_flags(a, c);
        Ok(())
    })?;
    let model = Vdvae::new(cfg.model.clone())?;
    let state = match &a.resume {
        Some(p) => resume_state(p, ModelKind::Base, |c| c.model == cfg.model)?,
        None => TrainState::new(model.init_params(cfg.train.seed), &cfg.train),
    };
    let data = load_dataset(&a.data_dir)?;
    let trainable: BTreeSet<String> = state.params.names().map(str::to_string).collect();
    let outcome = run_training(&model, &cfg, &trainable, &data, state, &a.run_dir)?;
    write_manifest(
        &a.run_dir,
        &RunManifest {
            command: "train-base",
            data_dir: a.data_dir.clone(),
            resumed_from: a.resume.clone(),
            pretrained: None,
            condition_mode: None,
            steps: outcome.state.step,
            steps_applied: outcome.state.steps_applied,
            steps_skipped: outcome.state.steps_skipped,
            final_checkpoint: outcome.final_checkpoint.clone(),
            import: None,
        },
    )
}

fn bit_equal(a: &ParamStore<f32>, b: &ParamStore<f32>, names: &BTreeSet<String>) -> bool {
    names.iter().all(|n| match (a.get(n), b.get(n)) {
        (Ok(x), Ok(y)) => {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        }
        _ => false,
    })
}

pub fn train_sr(args: TrainSrArgs) -> CmdResult {
    let a = &args.train;
    require_dir(&a.data_dir, "data directory")?;
    let mode = parse_flag(&args.condition_mode, "condition-mode")?;
    let policy = parse_flag(&args.freeze_policy, "freeze-policy")?;
    let pretrained = match &args.pretrained {
        Some(p) => {
            require_dir(p, "pretrained checkpoint")?;
            Some(checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let (mut cfg, model_given) = resolve_config(&a.config, a.preset, |c| {
        apply_train_flags(a, c);
        if let Some(m) = mode {
            c.sr.condition_mode = m;
        }
        if let Some(p) = policy {
            c.train.freeze_policy = p;
        }
        if let Some(s) = args.scale_factor {
            c.sr.scale_factor = s;
        }
        Ok(())
    })?;
    if let (Some(ckpt), false) = (&pretrained, model_given) {
        cfg.model = ckpt.model.clone();
        cfg.validate().map_err(|e| usage(e.to_string()))?;
    }
    let model = SrModel::new(cfg.sr_config()).map_err(|e| usage(e.to_string()))?;

    let mut import = None;
    let state = match (&a.resume, &pretrained) {
        (Some(p), _) => resume_state(p, ModelKind::Sr, |c| c.sr_config().as_ref() == Some(model.config()))?,
        (None, Some(ckpt)) => {
            let (params, manifest) = import_pretrained(ckpt, &model, cfg.train.seed)?;
            import = Some(manifest);
            TrainState::new(params, &cfg.train)
        }
        (None, None) => {
            log::warn!("no --pretrained checkpoint given; training the conditional model from scratch");
            TrainState::new(model.init_params(cfg.train.seed), &cfg.train)
        }
    };
    let partition = apply_freeze_policy(&state.params, cfg.train.freeze_policy);
    let before = state.params.clone();
    let data = load_dataset(&a.data_dir)?;
    let outcome = run_training(&model, &cfg, &partition.trainable, &data, state, &a.run_dir)?;
    let frozen_unchanged = bit_equal(&before, &outcome.state.params, &partition.frozen);
    if !frozen_unchanged {
        return Err(Failure::Runtime(anyhow!("a frozen tensor changed during training")));
    }
    write_manifest(
        &a.run_dir,
        &RunManifest {
            command: "train-sr",
            data_dir: a.data_dir.clone(),
            resumed_from: a.resume.clone(),
            pretrained: args.pretrained.clone(),
            condition_mode: Some(cfg.sr.condition_mode.to_string()),
            steps: outcome.state.step,
            steps_applied: outcome.state.steps_applied,
            steps_skipped: outcome.state.steps_skipped,
            final_checkpoint: outcome.final_checkpoint.clone(),
            import: import.map(|m| ImportRecord {
                copied_tensors: m.copied.len(),
                fresh_tensors: m.fresh.len(),
                frozen_tensors: partition.frozen.len(),
                frozen_unchanged,
            }),
        },
    )
}

/// Load a conditional checkpoint and fold its architecture into `cfg`.
fn load_sr_model(path: &Path, cfg: &mut RunConfig) -> CmdResult<(SrModel, ParamStore<f32>)> {
    require_dir(path, "model checkpoint")?;
    let ckpt = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let sr = ckpt
        .sr_config()
        .ok_or_else(|| anyhow!("{} holds an unconditional model; super-resolution needs a train-sr checkpoint", path.display()))?;
    cfg.model = sr.base.clone();
    cfg.sr = sr.options();
    let model = SrModel::new(sr)?;
    Ok((model, ckpt.params))
}

pub fn super_resolve(args: SuperResolveArgs) -> CmdResult {
    require_file(&args.input, "input image")?;
    let (mut cfg, _) = resolve_config(&args.config, None, |c| apply_inference_flags(&args.inference, c))?;
    let (model, params) = load_sr_model(&args.model, &mut cfg)?;
    let patch = cfg.eval.patch_size.unwrap_or(model.config().lr_size());
    let input = load_image(&args.input)?;
    let start = Instant::now();
    let out = model.super_resolve_image(
        &params,
        &input,
        patch,
        cfg.eval.overlap,
        cfg.eval.temperature,
        cfg.eval.seed,
        cfg.eval.decode,
    )?;
    let elapsed = start.elapsed();
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_png(&out.image, &args.output)?;
    let (h, w) = input.shape();
    let (oh, ow) = out.image.shape();
    println!("{h}x{w} -> {oh}x{ow} in {:.3} s, written to {}", elapsed.as_secs_f64(), args.output.display());
    if let Some((ph, pw)) = out.padded_from {
        println!("input reflection-padded to {ph}x{pw} and the output cropped back");
    }
    Ok(())
}

fn eval_setup(a: &EvalArgs) -> CmdResult<(RunConfig, Box<dyn SrMethod>, EvalOptions)> {
    require_dir(&a.dataset, "dataset")?;
    if let Some(lr) = &a.lr_dir {
        require_dir(lr, "LR directory")?;
    }
    let (mut cfg, _) = resolve_config(&a.config, None, |c| {
        apply_inference_flags(&a.inference, c)?;
        if let Some(s) = a.shave {
            c.eval.shave = Some(s);
        }
        if let Some(s) = a.scale_factor {
            c.sr.scale_factor = s;
        }
        Ok(())
    })?;
    let method: Box<dyn SrMethod> = match a.method {
        Method::Sr => {
            let path = a.model.as_ref().ok_or_else(|| usage("--method sr needs --model"))?;
            let (model, params) = load_sr_model(path, &mut cfg)?;
            let patch_size = cfg.eval.patch_size.unwrap_or(model.config().lr_size());
            Box::new(VdvaeSrMethod {
                model,
                params,
                patch_size,
                overlap: cfg.eval.overlap,
                decode: cfg.eval.decode,
            })
        }
        Method::Bicubic => Box::new(BicubicMethod {
            scale: cfg.sr.scale_factor,
        }),
        Method::Identity => Box::new(IdentityStub),
    };
    let opts = EvalOptions {
        temperature: cfg.eval.temperature,
        scale: cfg.sr.scale_factor,
        seed: cfg.eval.seed,
        shave: cfg.shave(),
        lr_dir: a.lr_dir.clone(),
    };
    Ok((cfg, method, opts))
}

fn check_failures(report: &MetricReport, out: &Path) -> CmdResult {
    let failed = report.failed();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{failed} of {} images failed; report written to {}",
            report.rows.len(),
            out.display()
        )));
    }
    Ok(())
}

fn fmt_mean(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn evaluate(args: EvaluateArgs) -> CmdResult {
    let a = &args.eval;
    let (cfg, method, opts) = eval_setup(a)?;
    let report = evaluate_dataset(method.as_ref(), &a.dataset, &opts)?;
    write_report(&report, &a.out)?;
    cfg.save(&a.out)?;
    println!(
        "{}: {} images, mean PSNR-Y {} dB, mean SSIM-Y {}",
        method.name(),
        report.rows.len(),
        fmt_mean(report.mean_psnr_y),
        fmt_mean(report.mean_ssim_y)
    );
    check_failures(&report, &a.out)
}

pub fn sweep(args: SweepArgs) -> CmdResult {
    let a = &args.eval;
    let (mut cfg, method, opts) = eval_setup(a)?;
    if let Some(t) = &args.temps {
        cfg.eval.temps = t.clone();
    }
    let result = temperature_sweep(method.as_ref(), &a.dataset, &cfg.eval.temps, &opts)
        .map_err(|e| match e {
            vdvae_sr::Error::Argument(m) => usage(format!("--temps: {m}")),
            e => e.into(),
        })?;
    write_sweep(&result, &a.out)?;
    cfg.save(&a.out)?;
    for row in &result.rows {
        println!(
            "t={}: mean PSNR-Y {} dB, mean SSIM-Y {}",
            row.temperature,
            fmt_mean(row.mean_psnr_y),
            fmt_mean(row.mean_ssim_y)
        );
    }
    for report in &result.reports {
        check_failures(report, &a.out)?;
    }
    Ok(())
}
