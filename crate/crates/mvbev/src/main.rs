//! Experiment CLI: dataset generation, baseline training, mean-teacher
//! adaptation, oracle training, checkpoint evaluation, and reporting.

use mvbev::pseudolabel::Method;
use mvbev::runner::{
    cmd_adapt, cmd_eval, cmd_gen, cmd_oracle, cmd_report, cmd_train_baseline, ExperimentConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "usage: mvbev <command> [flags]

commands:
  gen             generate the source and target datasets
  train-baseline  pre-train on source labels and evaluate
  adapt           self-train the baseline on the unlabeled target
  oracle          train on target labels (upper reference)
  eval            sweep an existing checkpoint
  report          summarize metrics and dump occupancy heatmaps

flags:
  --config PATH        experiment config (required)
  --out DIR            run directory (default: runs/<config name>)
  --seed N             override the config seed
  --checkpoint PATH    checkpoint to evaluate (eval only)
  --method NAME        eval extraction method: vanilla | local_max
  --tag NAME           metrics row label for eval (default: eval)

MVBEV_THREADS caps internal parallelism.";

struct Args {
    command: String,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    method: Method,
    tag: String,
}

fn parse_args() -> Result<Args, String> {
    let mut argv = std::env::args().skip(1);
    let command = argv.next().ok_or_else(|| USAGE.to_string())?;
    let mut args = Args {
        command,
        config: None,
        out: None,
        seed: None,
        checkpoint: None,
        method: Method::Vanilla,
        tag: "eval".to_string(),
    };
    while let Some(flag) = argv.next() {
        let mut value = || argv.next().ok_or(format!("flag {flag} needs a value"));
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(value()?)),
            "--out" => args.out = Some(PathBuf::from(value()?)),
            "--seed" => {
                args.seed = Some(value()?.parse().map_err(|e| format!("bad --seed: {e}"))?)
            }
            "--checkpoint" => args.checkpoint = Some(PathBuf::from(value()?)),
            "--method" => {
                args.method = match value()?.as_str() {
                    "vanilla" => Method::Vanilla,
                    "local_max" | "local-max" => Method::LocalMax,
                    other => return Err(format!("unknown method {other}")),
                }
            }
            "--tag" => args.tag = value()?,
            other => return Err(format!("unknown flag {other}\n\n{USAGE}")),
        }
    }
    Ok(args)
}

fn run() -> Result<(), String> {
    let args = parse_args()?;
    let config_path = args
        .config
        .as_ref()
        .ok_or("missing --config PATH".to_string())?;
    let mut cfg = ExperimentConfig::load(config_path).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    std::fs::create_dir_all(&out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;

    let result = match args.command.as_str() {
        "gen" => cmd_gen(&cfg, &out),
        "train-baseline" => cmd_train_baseline(&cfg, &out),
        "adapt" => cmd_adapt(&cfg, &out),
        "oracle" => cmd_oracle(&cfg, &out),
        "eval" => {
            let ckpt = args
                .checkpoint
                .as_ref()
                .ok_or("eval needs --checkpoint PATH".to_string())?;
            cmd_eval(&cfg, &out, ckpt, args.method, &args.tag)
        }
        "report" => cmd_report(&cfg, &out),
        other => return Err(format!("unknown command {other}\n\n{USAGE}")),
    };
    result.map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
