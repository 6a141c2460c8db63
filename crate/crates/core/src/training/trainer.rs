use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::data::{BatchStream, PairSampler};
use super::loss::charbonnier;
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::LrSchedule;
use crate::autodiff::{Graph, Tape};
use crate::error::{Error, Result};
use crate::evalkit::{self, Method};
use crate::model::{read_checkpoint, save_checkpoint};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

/// Optimisation and data settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub batch: usize,
    /// LR patch side.
    pub patch_lr: usize,
    pub iters: usize,
    /// Steps at which the rate halves; `None` picks 1/2, 3/4 and 7/8 of `iters`.
    pub milestones: Option<Vec<usize>>,
    pub seed: u64,
    pub charb_eps: f64,
    /// Random flips and rotations of training patches.
    pub augment: bool,
    /// Depth of the background batch queue; `None` samples on the training thread.
    pub prefetch: Option<usize>,
    pub clip_grad: Option<f64>,
    pub log_every: usize,
    /// Evaluate on `eval_dir` every this many steps; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.9,
            weight_decay: 0.0,
            eps: 1e-8,
            batch: 4,
            patch_lr: 48,
            iters: 1000,
            milestones: None,
            seed: 0,
            charb_eps: 1e-3,
            augment: true,
            prefetch: Some(4),
            clip_grad: None,
            log_every: 10,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.patch_lr == 0 {
            return bad("patch_lr must be positive");
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.charb_eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps and charb_eps must be positive, weight_decay non-negative");
        }
        if self.clip_grad.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_grad must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        let milestones = self
            .milestones
            .clone()
            .unwrap_or_else(|| LrSchedule::default_milestones(self.iters));
        LrSchedule::new(self.lr0, milestones)
    }

    /// `key = value` lines echoed at the top of the metrics log.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        format!(
            "lr0 = {}\nbeta1 = {}\nbeta2 = {}\nweight_decay = {}\neps = {}\nbatch = {}\npatch_lr = {}\n\
             iters = {}\nmilestones = {:?}\nseed = {}\ncharb_eps = {}\naugment = {}\nprefetch = {}\n\
             clip_grad = {}\n",
            self.lr0,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.eps,
            self.batch,
            self.patch_lr,
            self.iters,
            self.schedule().milestones(),
            self.seed,
            self.charb_eps,
            self.augment,
            opt(self.prefetch.map(|d| d.to_string())),
            opt(self.clip_grad.map(|c| c.to_string())),
        )
    }
}

/// Seed offset separating the data stream from parameter initialisation.
const DATA_SEED_SALT: u64 = 0x5DEECE66D;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    /// Loss of the batch before the update.
    pub loss: f64,
    pub grad_norm: Option<f64>,
}

/// Model parameters, optimiser moments and step counter.
pub struct Trainer {
    model: Model<f32>,
    opt: AdamW,
    schedule: LrSchedule,
    cfg: TrainConfig,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        Ok(Self { schedule: cfg.schedule(), model, opt, cfg, step: 0 })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Loss and parameter gradients for one batch.
    pub fn loss_and_grads(&self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<(f64, Vec<Tensor<f32>>)> {
        let mut tape = Tape::<f32>::new();
        let p = self.model.params().bind(&mut tape);
        let x = tape.input(lr.clone());
        let y = tape.input(hr.clone());
        let pred = self.model.forward(&mut tape, &p, &x)?;
        let loss = charbonnier(&mut tape, &pred, &y, self.cfg.charb_eps)?;
        let value = tape.value(&loss).data()[0] as f64;
        tape.backward_release(loss)?;
        let grads = p
            .iter()
            .zip(self.model.params().iter())
            .map(|(&v, (_, t))| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Forward, backward and one optimiser update.
    pub fn step(&mut self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<StepStats> {
        let (loss, mut grads) = self.loss_and_grads(lr, hr)?;
        let grad_norm = self.cfg.clip_grad.map(|c| clip_grad_norm(&mut grads, c));
        let rate = self.schedule.lr(self.step);
        self.opt.step(self.model.params_mut(), &grads, rate)?;
        self.step += 1;
        Ok(StepStats { step: self.step, lr: rate, loss, grad_norm })
    }

    /// Loss of a batch without recording a tape.
    pub fn eval_loss(&self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<f64> {
        let pred = self.model.upscale(lr)?;
        let mut g = crate::autodiff::Eager;
        Ok(charbonnier(&mut g, &pred, hr, self.cfg.charb_eps)?.data()[0] as f64)
    }
}

/// Files and sources of one training run.
#[derive(Clone, Debug)]
pub struct TrainPaths {
    pub data_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub first_loss: f64,
    pub last_loss: f64,
    pub steps: usize,
    /// Buffers left at their fresh initialisation after loading `init_checkpoint`.
    pub reinitialized: Vec<String>,
}

/// Builds the model, optionally warm-starting from a checkpoint. A checkpoint
/// with a different scale transfers everything except the upsampler.
pub fn init_model(cfg: &ModelConfig, seed: u64, init: Option<&Path>) -> Result<(Model<f32>, Vec<String>)> {
    let mut model = Model::new(cfg.clone(), seed)?;
    let Some(path) = init else {
        return Ok((model, Vec::new()));
    };
    let ckpt = read_checkpoint(path)?;
    if ckpt.config.scale == cfg.scale {
        model.load_params(&ckpt.params)?;
        Ok((model, Vec::new()))
    } else {
        let reinit = model.load_except_upsampler(&ckpt.params)?;
        Ok((model, reinit))
    }
}

/// Runs the full loop and writes the checkpoint and metrics log. Every log
/// line is also passed to `echo`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    paths: &TrainPaths,
    header: &[String],
    echo: &mut dyn FnMut(&str),
) -> Result<TrainSummary> {
    cfg.validate()?;
    model_cfg.validate()?;
    let sampler = PairSampler::from_dir(&paths.data_dir, model_cfg.scale, cfg.patch_lr, cfg.augment)?;
    let (model, reinitialized) = init_model(model_cfg, cfg.seed, paths.init_checkpoint.as_deref())?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut stream = BatchStream::new(sampler, cfg.seed ^ DATA_SEED_SALT, cfg.batch, cfg.prefetch);

    let file = File::create(&paths.metrics_log).map_err(|e| Error::io(&paths.metrics_log, e))?;
    let mut log = BufWriter::new(file);
    let mut emit = |line: &str| -> Result<()> {
        echo(line);
        writeln!(log, "{line}").map_err(|e| Error::io(&paths.metrics_log, e))
    };
    for line in header {
        emit(&format!("# {line}"))?;
    }
    for line in model_cfg.to_kv().lines().chain(cfg.to_kv().lines()) {
        emit(&format!("# {line}"))?;
    }
    for name in &reinitialized {
        emit(&format!("# reinitialized = {name}"))?;
    }

    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.iters {
        let (lr, hr) = stream.next_batch()?;
        let stats = trainer.step(&lr, &hr)?;
        if stats.step == 1 {
            first_loss = stats.loss;
        }
        last_loss = stats.loss;
        let log_now = cfg.log_every > 0 && (stats.step % cfg.log_every == 0 || stats.step == 1);
        let eval_now = cfg.eval_every > 0 && stats.step % cfg.eval_every == 0 && paths.eval_dir.is_some();
        if log_now || eval_now || stats.step == cfg.iters {
            let mut line = format!("step={} lr={:.6e} loss={:.8e}", stats.step, stats.lr, stats.loss);
            if eval_now {
                let dir = paths.eval_dir.as_deref().expect("checked above");
                let report = evalkit::evaluate(&Method::Model(trainer.model()), dir, model_cfg.scale)?;
                line.push_str(&format!(" psnr={}", evalkit::format_db(report.mean_psnr)));
            }
            emit(&line)?;
        }
    }
    log.flush().map_err(|e| Error::io(&paths.metrics_log, e))?;
    let steps = trainer.steps_taken();
    save_checkpoint(&paths.checkpoint, trainer.model())?;
    Ok(TrainSummary { first_loss, last_loss, steps, reinitialized })
}
