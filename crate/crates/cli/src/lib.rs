//! Command-line wiring: argument parsing, config resolution, dispatch, and
//! exit-code mapping.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 verification failure,
//! 3 numerical abort.

pub mod commands;
pub mod config;

use commands::Ctx;
use config::RunConfig;
use svphw_core::error::Error;

const USAGE: &str = "\
usage: svphw <command> [flags]

commands:
  gen-data    generate a synthetic sprite dataset
  train       train a model on a dataset
  predict     sample future frames from a checkpoint
  eval        score a checkpoint with PSNR/SSIM
  flops       report per-layer MAC/parameter costs
  gradcheck   run the finite-difference verification suites

flags:
  --config PATH    load key = value settings from a file
  --seed N         override the global seed
  --out DIR        override the output directory
  --force          overwrite non-empty output
  --threads N      fan out data generation and evaluation
  --fp64           run model arithmetic in f64 (verification mode)
  --KEY=VALUE      override any config key
";

/// Parses arguments and runs one command, returning the process exit code.
pub fn run(args: &[String]) -> i32 {
    match run_inner(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => 3,
                _ => 1,
            }
        }
    }
}

fn run_inner(args: &[String]) -> Result<i32, Error> {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Ok(1);
    };
    let mut config = RunConfig::new();
    let mut force = false;
    let mut threads = 1usize;
    let mut fp64 = false;

    // config file first so explicit flags win
    let rest = &args[1..];
    let mut i = 0;
    while i < rest.len() {
        if rest[i] == "--config" || rest[i].starts_with("--config=") {
            let value = flag_value(rest, &mut i, "--config")?;
            config.apply_file(std::path::Path::new(&value))?;
        } else {
            i += 1;
        }
    }
    let mut i = 0;
    while i < rest.len() {
        let arg = &rest[i];
        if arg == "--config" || arg.starts_with("--config=") {
            let _ = flag_value(rest, &mut i, "--config")?;
        } else if arg == "--force" {
            force = true;
            i += 1;
        } else if arg == "--fp64" {
            fp64 = true;
            i += 1;
        } else if arg == "--seed" || arg.starts_with("--seed=") {
            let v = flag_value(rest, &mut i, "--seed")?;
            config.set("seed", &v)?;
        } else if arg == "--out" || arg.starts_with("--out=") {
            let v = flag_value(rest, &mut i, "--out")?;
            config.set("out_dir", &v)?;
        } else if arg == "--threads" || arg.starts_with("--threads=") {
            let v = flag_value(rest, &mut i, "--threads")?;
            threads = v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad --threads value '{v}'")))?;
        } else if let Some(kv) = arg.strip_prefix("--") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("unknown flag '{arg}' (overrides use --key=value)")))?;
            config.set(k, v)?;
            i += 1;
        } else {
            return Err(Error::InvalidArgument(format!("unexpected argument '{arg}'")));
        }
    }

    let ctx = Ctx { config, force, threads: threads.max(1), fp64 };
    match command.as_str() {
        "gen-data" => commands::cmd_gen_data(&ctx).map(|_| 0),
        "train" => commands::cmd_train(&ctx).map(|_| 0),
        "predict" => commands::cmd_predict(&ctx).map(|_| 0),
        "eval" => commands::cmd_eval(&ctx).map(|_| 0),
        "flops" => commands::cmd_flops(&ctx).map(|_| 0),
        "gradcheck" => commands::cmd_gradcheck(&ctx).map(|ok| if ok { 0 } else { 2 }),
        other => {
            eprintln!("unknown command '{other}'");
            eprint!("{USAGE}");
            Ok(1)
        }
    }
}

fn flag_value(args: &[String], i: &mut usize, name: &str) -> Result<String, Error> {
    let arg = &args[*i];
    if let Some(v) = arg.strip_prefix(&format!("{name}=")) {
        *i += 1;
        return Ok(v.to_string());
    }
    if *i + 1 < args.len() {
        let v = args[*i + 1].clone();
        *i += 2;
        return Ok(v);
    }
    Err(Error::InvalidArgument(format!("flag {name} needs a value")))
}
