//! `icode` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use icode::diagnostics::{grad_check_suite, FD_TOL};
use icode::encoders::Modality;
use icode::model::Model;
use icode::synthdata::StreamKind;
use icode::trainer::{
    eval_retrieval, finetune, pretrain, Checkpoint, FinetuneConfig, Preset, Task, TrainConfig,
};

#[derive(Parser)]
#[command(name = "icode", version, about = "Multimodal fusion pretraining on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain from scratch, writing metrics.jsonl and checkpoint.bin into --out.
    Pretrain {
        /// JSON overlay on the preset; unknown keys are rejected.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "desk")]
        preset: Preset,
    },
    /// Train a linear head on frozen joint representations.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        /// cls16 or regress.
        #[arg(long)]
        task: Task,
        /// Any non-empty subset of V, L, S.
        #[arg(long, default_value = "VLS")]
        modalities: String,
        /// Also run the same budget from a randomly initialised model.
        #[arg(long)]
        compare_scratch: bool,
        /// Optional JSON overlay on the finetuning defaults.
        #[arg(long)]
        settings: Option<String>,
    },
    /// Recall@1/5 in both directions on held-out pairs.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        /// VL, VS or LS.
        #[arg(long)]
        kind: StreamKind,
        #[arg(long, default_value_t = 256)]
        n: usize,
    },
    /// Finite-difference check of analytic gradients (64-bit, tiny model).
    GradCheck {
        /// One of the module names; all when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Parameter counts of the model a config describes.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: Preset,
    },
}

fn load_config(preset: Preset, path: Option<&Path>) -> Result<TrainConfig> {
    let json = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => "{}".into(),
    };
    Ok(TrainConfig::from_json_overlay(preset, &json)?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain {
            config,
            out,
            seed,
            preset,
        } => {
            let mut cfg = load_config(preset, Some(&config))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let steps = cfg.steps;
            let run = pretrain(cfg, &out)?;
            eprintln!(
                "trained {steps} steps; metrics {} checkpoint {}",
                run.metrics_path.display(),
                run.checkpoint_path.display()
            );
        }
        Command::Finetune {
            ckpt,
            task,
            modalities,
            compare_scratch,
            settings,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = &ck.header.config;
            let mods = Modality::parse_set(&modalities)?;
            let fc: FinetuneConfig = match settings {
                Some(s) => serde_json::from_str(&s).context("finetune settings")?,
                None => FinetuneConfig::default(),
            };
            let model = ck.model()?;
            let report = finetune(&model, task, &mods, &fc, &cfg.synth)?;
            for e in &report.epochs {
                println!("{}", serde_json::to_string(e)?);
            }
            if compare_scratch {
                let scratch = Model::<f32>::new(&cfg.model, cfg.seed)?;
                let base = finetune(&scratch, task, &mods, &fc, &cfg.synth)?;
                print_json(&serde_json::json!({
                    "task": task,
                    "modalities": report.modalities,
                    "pretrained": report.final_metric(),
                    "scratch": base.final_metric(),
                }))?;
            } else {
                print_json(&serde_json::json!({
                    "task": task,
                    "modalities": report.modalities,
                    "pretrained": report.final_metric(),
                }))?;
            }
        }
        Command::EvalRetrieval { ckpt, kind, n } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = &ck.header.config;
            let model = ck.model()?;
            print_json(&eval_retrieval(&model, kind, n, cfg.seed, &cfg.synth)?)?;
        }
        Command::GradCheck { module, seeds } => {
            let reports = grad_check_suite(module.as_deref(), seeds)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{:<13} {} max rel err {:.3e} over {} coords ({} seeds)",
                    r.module,
                    if r.passed { "ok  " } else { "FAIL" },
                    r.max_rel_err,
                    r.coords,
                    r.seeds
                );
                failed += (!r.passed) as usize;
            }
            if failed > 0 {
                bail!("{failed} module(s) exceed relative error {FD_TOL:e}");
            }
        }
        Command::ParamCount { config, preset } => {
            let cfg = load_config(preset, config.as_deref())?;
            let model = Model::<f32>::new(&cfg.model, cfg.seed)?;
            let mut fusion_group = 0;
            let mut encoder_group = 0;
            for (_, p) in model.store.iter() {
                match p.group {
                    icode::numkit::ParamGroup::Fusion => fusion_group += p.tensor.len(),
                    icode::numkit::ParamGroup::Encoder => encoder_group += p.tensor.len(),
                }
            }
            print_json(&serde_json::json!({
                "total": model.store.num_scalars(),
                "fusion_group": fusion_group,
                "encoder_group": encoder_group,
                "fusion_layers": cfg.model.fusion.num_params(),
                "mode": cfg.model.fusion.mode,
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let defaults = serde_json::to_string_pretty(&TrainConfig::preset(Preset::Desk)).unwrap_or_default();
    let cmd = Cli::command().mut_subcommand("pretrain", |c| {
        c.after_long_help(format!("Desk preset defaults (every key may be overridden):\n{defaults}"))
    });
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
