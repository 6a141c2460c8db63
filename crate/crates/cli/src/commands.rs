use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use agileir::evalkit::{self, format_db, Method};
use agileir::gradcheck::{self, Scope, TOLERANCE};
use agileir::memcost::{activation_cost, compare, human, measure_peak};
use agileir::model::{count_params, load_checkpoint};
use agileir::training::data::{BatchStream, PairSampler};
use agileir::training::{train as run_training, TrainConfig, TrainPaths, Trainer};
use agileir::{imageio, Model, ModelConfig};

use crate::config;
use crate::{CliError, EvalArgs, GradcheckArgs, InferArgs, MemreportArgs, MethodArg, QksweepArgs, ScopeArg, TrainArgs};

type CmdResult = Result<(), CliError>;

/// `--seed`, else the config's seed, else fresh OS entropy.
fn pick_seed(flag: Option<u64>, from_config: Option<u64>) -> u64 {
    flag.or(from_config).unwrap_or_else(rand::random)
}

fn check_scale(scale: usize) -> CmdResult {
    if scale == 2 || scale == 4 {
        Ok(())
    } else {
        Err(CliError::usage(format!("scale must be 2 or 4, got {scale}")))
    }
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn train(args: TrainArgs) -> CmdResult {
    let run = config::load(args.config.as_deref(), &args.overrides)?;
    let seed = pick_seed(args.seed, run.seed);
    let model_cfg = run.model.resolve()?;
    let train_cfg = run.train.resolve(seed)?;
    let data_dir = run
        .paths
        .data_dir
        .clone()
        .ok_or_else(|| CliError::usage("paths.data_dir is not set (config file or --set paths.data_dir=...)"))?;
    let paths = TrainPaths {
        data_dir,
        init_checkpoint: run.paths.init_checkpoint.clone(),
        eval_dir: run.paths.eval_dir.clone(),
        checkpoint: run.paths.checkpoint.clone().unwrap_or_else(|| PathBuf::from("agileir.ckpt")),
        metrics_log: run.paths.metrics_log.clone().unwrap_or_else(|| PathBuf::from("train.log")),
    };
    if train_cfg.eval_every > 0 && paths.eval_dir.is_none() {
        return Err(CliError::usage("train.eval_every needs paths.eval_dir"));
    }
    let header = vec![
        "command = train".to_string(),
        format!("model.preset = {}", run.model.preset),
        format!(
            "config = {}",
            args.config.as_ref().map_or("none".into(), |p| p.display().to_string())
        ),
    ];
    let summary = run_training(&model_cfg, &train_cfg, &paths, &header, &mut |line| println!("{line}"))?;
    println!(
        "trained {} steps: loss {:.6} -> {:.6}; checkpoint {}; log {}",
        summary.steps,
        summary.first_loss,
        summary.last_loss,
        paths.checkpoint.display(),
        paths.metrics_log.display()
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> CmdResult {
    check_scale(args.scale)?;
    let model = match (args.method, &args.checkpoint) {
        (MethodArg::Model, None) => return Err(CliError::usage("--method model needs --checkpoint")),
        (MethodArg::Model, Some(path)) => {
            let model = load_checkpoint(path)?;
            if model.config().scale != args.scale {
                return Err(CliError::usage(format!(
                    "checkpoint is x{}, --scale is {}",
                    model.config().scale,
                    args.scale
                )));
            }
            Some(model)
        }
        _ => None,
    };
    let method = match (args.method, &model) {
        (MethodArg::Model, Some(m)) => Method::Model(m),
        (MethodArg::Bicubic, _) => Method::Bicubic,
        _ => Method::Reference,
    };
    let report = evalkit::evaluate(&method, &args.data, args.scale)?;
    let path = args
        .report
        .unwrap_or_else(|| PathBuf::from(format!("eval_x{}_{}.txt", args.scale, method.name())));
    report.write(&path)?;
    for s in &report.images {
        println!("{:<24} PSNR {:>8} dB  SSIM {:.4}", s.name, format_db(s.psnr), s.ssim);
    }
    for (name, why) in &report.failures {
        println!("{name:<24} failed: {why}");
    }
    println!("{}", report.summary());
    println!("report written to {}", path.display());
    Ok(())
}

pub fn infer(args: InferArgs) -> CmdResult {
    let model = load_checkpoint(&args.checkpoint)?;
    let s = model.config().scale;
    if let Some(want) = args.scale {
        check_scale(want)?;
        if want != s {
            return Err(CliError::usage(format!("checkpoint is x{s}, --scale is {want}")));
        }
    }
    let img = imageio::load_rgb(&args.input)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let x = img.reshape(&[1, 3, h, w])?;
    let y = model.upscale(&x)?.reshape(&[3, s * h, s * w])?;
    imageio::save_rgb(&args.output, &y)?;
    println!("{}x{} -> {}x{}: {}", w, h, s * w, s * h, args.output.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let scope = args.scope.map(|s| match s {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Layer => Scope::Layer,
        ScopeArg::Model => Scope::Model,
    });
    let outcomes = gradcheck::run(scope, &args.only, args.inject_fault.as_deref(), args.seed)?;
    println!("{:<6} {:<28} {:>12} {:>8}  status", "scope", "target", "max_rel_err", "inputs");
    let mut failed = Vec::new();
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        println!("{:<6} {:<28} {:>12.3e} {:>8}  {status}", o.scope.as_str(), o.name, o.max_rel_err, o.perturbed);
        if !o.passed() {
            failed.push(o.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} targets within {TOLERANCE:e}", outcomes.len());
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "{} of {} targets exceed {TOLERANCE:e}: {}",
            failed.len(),
            outcomes.len(),
            failed.join(", ")
        )))
    }
}

pub fn memreport(args: MemreportArgs) -> CmdResult {
    let a = ModelConfig::preset(&args.a)?;
    let b = ModelConfig::preset(&args.b)?;
    let cmp = compare(&a, &b, args.batch, args.height, args.width)?;
    let mut out = if args.machine {
        format!("preset a={} b={}\n{}", args.a, args.b, cmp.to_kv())
    } else {
        format!(
            "batch {} at {}x{} LR, 4 bytes per element\n{}",
            args.batch,
            args.height,
            args.width,
            cmp.to_text(&args.a, &args.b)
        )
    };
    if args.layers && !args.machine {
        for (name, r) in [(&args.a, &cmp.a), (&args.b, &cmp.b)] {
            let _ = write!(out, "\n{name}\n{}", r.to_table());
        }
    }
    if args.measure {
        let limit = args.limit_mib.saturating_mul(1 << 20);
        let peak = measure_peak(&b, args.batch, args.height, args.width, Some(limit))?;
        let r = activation_cost(&b, args.batch, args.height, args.width, 4)?;
        let analytic = r.activation_bytes() + r.grad_bytes();
        let ratio = peak.step_bytes() as f64 / analytic as f64;
        if args.machine {
            let _ = writeln!(
                out,
                "measured preset={} step_bytes={} analytic_bytes={analytic} ratio={ratio:.4}",
                args.b,
                peak.step_bytes()
            );
        } else {
            let _ = writeln!(
                out,
                "measured {} step peak: {} vs analytic activations+grads {} (x{ratio:.2})",
                args.b,
                human(peak.step_bytes()),
                human(analytic)
            );
        }
    }
    print!("{out}");
    Ok(())
}

fn sweep_widths(args: &QksweepArgs, heads: usize) -> Result<Vec<usize>, CliError> {
    if !args.total_qk.is_empty() {
        return args
            .total_qk
            .iter()
            .map(|&t| {
                if t == 0 || t % heads != 0 {
                    Err(CliError::usage(format!(
                        "total query/key width {t} does not split into {heads} groups ({} per group)",
                        t as f64 / heads as f64
                    )))
                } else {
                    Ok(t / heads)
                }
            })
            .collect();
    }
    if args.dk.contains(&0) {
        return Err(CliError::usage("query/key widths must be positive"));
    }
    Ok(args.dk.clone())
}

/// Trains a fresh variant for the sweep's budget and scores it.
fn short_run(cfg: &ModelConfig, args: &QksweepArgs, seed: u64, data: &Path, eval_dir: &Path) -> Result<f64, CliError> {
    let train_cfg = TrainConfig {
        iters: args.iters,
        batch: args.batch,
        patch_lr: args.patch,
        seed,
        prefetch: None,
        ..TrainConfig::default()
    };
    let sampler = PairSampler::from_dir(data, cfg.scale, args.patch, train_cfg.augment)?;
    let mut stream = BatchStream::new(sampler, seed, args.batch, None);
    let mut trainer = Trainer::new(Model::new(cfg.clone(), seed)?, train_cfg)?;
    for _ in 0..args.iters {
        let (lr, hr) = stream.next_batch()?;
        trainer.step(&lr, &hr)?;
    }
    Ok(evalkit::evaluate(&Method::Model(trainer.model()), eval_dir, cfg.scale)?.mean_psnr)
}

pub fn qksweep(args: QksweepArgs) -> CmdResult {
    let base = ModelConfig::preset(&args.preset)?;
    let heads = args.heads.unwrap_or(base.heads);
    let widths = sweep_widths(&args, heads)?;
    let train_now = args.iters > 0;
    let eval_dir = match (&args.eval_dir, train_now) {
        (Some(d), _) => Some(d.clone()),
        (None, true) => return Err(CliError::usage("--iters needs --eval-dir")),
        (None, false) => None,
    };
    let seed = pick_seed(args.seed, None);
    let mut table = String::from("d_k\tqk_total\tparams\tpsnr_db\tdelta_db\n");
    if train_now {
        println!("# seed = {seed}, {} steps per variant", args.iters);
    }
    let mut rows = Vec::new();
    for &dk in &widths {
        let cfg = ModelConfig { heads, qk_dim: dk, ..base.clone() };
        cfg.validate()?;
        let params = count_params(&cfg)?;
        let psnr = match (&eval_dir, train_now) {
            (Some(dir), true) => {
                let data = args.data.as_deref().unwrap_or(dir);
                Some(short_run(&cfg, &args, seed, data, dir)?)
            }
            _ => None,
        };
        rows.push((dk, params, psnr));
    }
    // Deltas are relative to the widest variant.
    let widest = rows.iter().max_by_key(|r| r.0).and_then(|r| r.2);
    for (dk, params, psnr) in &rows {
        let (p, d) = match (psnr, widest) {
            (Some(p), Some(w)) => (format_db(*p), format!("{:+.4}", p - w)),
            _ => ("-".into(), "-".into()),
        };
        let _ = writeln!(table, "{dk}\t{}\t{params}\t{p}\t{d}", dk * heads);
    }
    print!("{table}");
    if let Some(out) = &args.out {
        write_file(out, &table)?;
    }
    Ok(())
}
